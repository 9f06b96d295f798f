//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in evaluation order. Nodes are only
//! ever appended, so the tape is acyclic by construction and the backward
//! sweep is a single reverse pass that visits each node once.
//!
//! ```
//! use boneage_core::autodiff::Graph;
//! use boneage_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item().unwrap(), 9.0);
//! assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial hyper-parameters of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Which statistics a batch-norm node normalizes with.
#[derive(Debug, Clone, PartialEq)]
pub enum NormStats {
    /// Statistics of the current batch (training).
    Batch { eps: f64 },
    /// Externally supplied per-channel mean and variance (inference).
    Fixed {
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Values per channel the moments were computed over.
    pub count: usize,
}

#[derive(Debug, Clone)]
struct NormSaved {
    outer: usize,
    channels: usize,
    inner: usize,
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    batch: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        window: Window,
    },
    AvgPool2d {
        input: Var,
        window: Window,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        input: Var,
        rows: Vec<usize>,
    },
    GatherPillars {
        input: Var,
        cells: Vec<(usize, usize, usize)>,
    },
    ConcatCols(Var, Var),
    BlockMean {
        input: Var,
        block: usize,
    },
    BlockLeftMul {
        input: Var,
        matrix: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, zero-filled when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// A recording of tensor operations.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    fn val(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "add", |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "sub", |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), "mul", |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.val(a).map(|x| x * factor);
        self.push_op(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.val(a).map(|x| x + c);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(self.val(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.val(x).dims2("add_row_bias")?;
        let b = self.val(bias);
        if b.len() != c {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias of {} values for {} columns", b.len(), c),
            ));
        }
        let mut out = self.val(x).clone();
        for i in 0..r {
            for (o, bv) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push_op(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.val(a).map(f64::abs);
        self.push_op(out, Op::Abs(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push_op(out, Op::Mean(a), &[a]))
    }

    /// Sums each row of an `r x c` matrix into an `r x 1` column, left to right.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a);
        let (r, c) = t.dims2("row_sum")?;
        let data = (0..r)
            .map(|i| t.data()[i * c..(i + 1) * c].iter().fold(0.0, |acc, v| acc + v))
            .collect();
        let out = Tensor::new(vec![r, 1], data)?;
        Ok(self.push_op(out, Op::RowSum(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Cross-correlation of `input: B x Cin x H x W` with `weight: Cout x Cin x k x k`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, window: Window) -> Result<Var> {
        let (b, cin, h, w) = self.val(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.val(weight).dims4("conv2d")?;
        if wcin != cin || kh != window.kernel || kw != window.kernel {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input {:?} with weight {:?} and kernel {}",
                    self.val(input).shape(),
                    self.val(weight).shape(),
                    window.kernel
                ),
            ));
        }
        if let Some(bv) = bias {
            if self.val(bv).len() != cout {
                return Err(Error::shape("conv2d", format!("bias needs {} values", cout)));
            }
        }
        let (ho, wo) = match (window.out_len(h), window.out_len(w)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("window {:?} does not fit {}x{}", window, h, w),
                ))
            }
        };
        let geom = ConvGeom {
            b,
            cin,
            h,
            w,
            cout,
            ho,
            wo,
            win: window,
        };
        let mut out = vec![0.0; b * cout * ho * wo];
        geom.forward(self.val(input).data(), self.val(weight).data(), &mut out);
        if let Some(bv) = bias {
            let bd = self.val(bv).data();
            for bi in 0..b {
                for co in 0..cout {
                    let base = (bi * cout + co) * ho * wo;
                    for o in &mut out[base..base + ho * wo] {
                        *o += bd[co];
                    }
                }
            }
        }
        let out = Tensor::new(vec![b, cout, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push_op(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
            },
            &inputs,
        ))
    }

    /// Average pooling over `B x C x H x W`; padded cells count as zeros.
    pub fn avg_pool2d(&mut self, input: Var, window: Window) -> Result<Var> {
        let (b, c, h, w) = self.val(input).dims4("avg_pool2d")?;
        let (ho, wo) = match (window.out_len(h), window.out_len(w)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::shape(
                    "avg_pool2d",
                    format!("window {:?} does not fit {}x{}", window, h, w),
                ))
            }
        };
        let x = self.val(input).data();
        let norm = 1.0 / (window.kernel * window.kernel) as f64;
        let mut out = vec![0.0; b * c * ho * wo];
        for plane in 0..b * c {
            let xin = &x[plane * h * w..(plane + 1) * h * w];
            let o = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for_window(window, oy, ox, h, w, |iy, ix| acc += xin[iy * w + ix]);
                    o[oy * wo + ox] = acc * norm;
                }
            }
        }
        let out = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push_op(out, Op::AvgPool2d { input, window }, &[input]))
    }

    /// Per-channel normalization followed by `gamma * x_hat + beta`.
    ///
    /// `input` is `rows x channels` or `B x channels x H x W`. The number of
    /// normalized channels may be a multiple of `gamma.len()`, in which case
    /// channel `c` uses `gamma[c % gamma.len()]`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let x = self.val(input);
        let (outer, channels, inner) = match x.shape() {
            [r, c] => (*r, *c, 1),
            [b, c, h, w] => (*b, *c, h * w),
            s => {
                return Err(Error::shape(
                    "batch_norm",
                    format!("expected 2-D or 4-D input, got {:?}", s),
                ))
            }
        };
        let period = self.val(gamma).len();
        if period == 0 || channels % period != 0 || self.val(beta).len() != period {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{} channels with gamma of {} and beta of {}",
                    channels,
                    period,
                    self.val(beta).len()
                ),
            ));
        }
        let count = outer * inner;
        let xd = x.data();
        let (mean, var, eps, batch) = match stats {
            NormStats::Batch { eps } => {
                if count < 2 {
                    return Err(Error::BatchTooSmall(count));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for o in 0..outer {
                        let base = (o * channels + c) * inner;
                        s += xd[base..base + inner].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for o in 0..outer {
                        let base = (o * channels + c) * inner;
                        ss += xd[base..base + inner].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = ss / count as f64;
                }
                (mean, var, *eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics for {} channels, input has {}", mean.len(), channels),
                    ));
                }
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let gd = self.val(gamma).data();
        let bd = self.val(beta).data();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                let (g, b) = (gd[c % period], bd[c % period]);
                for s in base..base + inner {
                    let xh = (xd[s] - mean[c]) * inv_std[c];
                    x_hat[s] = xh;
                    out[s] = g * xh + b;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let moments = batch.then(|| BatchMoments {
            mean,
            var,
            count,
        });
        let saved = NormSaved {
            outer,
            channels,
            inner,
            x_hat,
            inv_std,
            batch,
        };
        let v = self.push_op(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
            &[input, gamma, beta],
        );
        Ok((v, moments))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.val(input);
        let (r, c) = x.dims2("gather_rows")?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {} of {}", bad, r)));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(x.row(i));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push_op(
            out,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            &[input],
        ))
    }

    /// Places row `k` of `input` at row `rows[k]` of a zero `total x c` matrix.
    pub fn scatter_rows(&mut self, input: Var, rows: &[usize], total: usize) -> Result<Var> {
        let x = self.val(input);
        let (r, c) = x.dims2("scatter_rows")?;
        if r != rows.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} rows for {} targets", r, rows.len()),
            ));
        }
        if let Some(bad) = rows.iter().find(|&&i| i >= total) {
            return Err(Error::shape("scatter_rows", format!("row {} of {}", bad, total)));
        }
        let mut data = vec![0.0; total * c];
        for (k, &i) in rows.iter().enumerate() {
            for (d, s) in data[i * c..(i + 1) * c].iter_mut().zip(x.row(k)) {
                *d += s;
            }
        }
        let out = Tensor::new(vec![total, c], data)?;
        Ok(self.push_op(
            out,
            Op::ScatterRows {
                input,
                rows: rows.to_vec(),
            },
            &[input],
        ))
    }

    /// Reads the channel vector at `(sample, i, j)` of a `B x C x H x W` map
    /// for each cell, giving a `cells x C` matrix.
    pub fn gather_pillars(&mut self, input: Var, cells: &[(usize, usize, usize)]) -> Result<Var> {
        let x = self.val(input);
        let (b, c, h, w) = x.dims4("gather_pillars")?;
        let mut data = Vec::with_capacity(cells.len() * c);
        for &(bi, i, j) in cells {
            if bi >= b || i >= h || j >= w {
                return Err(Error::shape(
                    "gather_pillars",
                    format!("cell ({}, {}, {}) outside {:?}", bi, i, j, x.shape()),
                ));
            }
            for ch in 0..c {
                data.push(x.data()[((bi * c + ch) * h + i) * w + j]);
            }
        }
        let out = Tensor::new(vec![cells.len(), c], data)?;
        Ok(self.push_op(
            out,
            Op::GatherPillars {
                input,
                cells: cells.to_vec(),
            },
            &[input],
        ))
    }

    /// Column-wise concatenation of `r x p` and `r x q`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.val(a).dims2("concat_cols")?;
        let (rb, cb) = self.val(b).dims2("concat_cols")?;
        if ra != rb {
            return Err(Error::shape("concat_cols", format!("{} rows vs {}", ra, rb)));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(self.val(a).row(i));
            data.extend_from_slice(self.val(b).row(i));
        }
        let out = Tensor::new(vec![ra, ca + cb], data)?;
        Ok(self.push_op(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Replaces every row of each consecutive block of `block` rows with the
    /// block's row mean.
    pub fn block_mean(&mut self, input: Var, block: usize) -> Result<Var> {
        let x = self.val(input);
        let (r, c) = x.dims2("block_mean")?;
        if block == 0 || r % block != 0 {
            return Err(Error::shape("block_mean", format!("{} rows in blocks of {}", r, block)));
        }
        let mut data = vec![0.0; r * c];
        for blk in 0..r / block {
            let mut mean = vec![0.0; c];
            for i in blk * block..(blk + 1) * block {
                for (m, v) in mean.iter_mut().zip(x.row(i)) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= block as f64;
            }
            for i in blk * block..(blk + 1) * block {
                data[i * c..(i + 1) * c].copy_from_slice(&mean);
            }
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push_op(out, Op::BlockMean { input, block }, &[input]))
    }

    /// Left-multiplies each consecutive `n`-row block of `input` by the
    /// constant `n x n` matrix.
    pub fn block_left_mul(&mut self, input: Var, matrix: &Tensor) -> Result<Var> {
        let x = self.val(input);
        let (r, c) = x.dims2("block_left_mul")?;
        let (n, n2) = matrix.dims2("block_left_mul")?;
        if n != n2 || n == 0 || r % n != 0 {
            return Err(Error::shape(
                "block_left_mul",
                format!("matrix {:?} against {} rows", matrix.shape(), r),
            ));
        }
        let mut data = vec![0.0; r * c];
        for blk in 0..r / n {
            let span = blk * n * c..(blk + 1) * n * c;
            matmul_into(matrix.data(), &x.data()[span.clone()], &mut data[span], n, n, c);
        }
        let out = Tensor::new(vec![r, c], data)?;
        Ok(self.push_op(
            out,
            Op::BlockLeftMul {
                input,
                matrix: matrix.clone(),
            },
            &[input],
        ))
    }

    /// Mean absolute difference between equal-shaped tensors.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.val(pred).check_same_shape(self.val(target), "l1_loss")?;
        let diff = self.sub(pred, target)?;
        let abs = self.abs(diff);
        self.mean(abs)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.val(output).shape();
        if self.val(output).len() != 1 {
            return Err(Error::NonScalarBackward(shape.to_vec()));
        }
        self.backward_with_seed(output, Tensor::ones(shape))
    }

    /// Reverse sweep seeded with an explicit output cotangent.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.val(output).check_same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                self.accumulate(grads, *a, || zip(g, vb, |x, y| x * y));
                self.accumulate(grads, *b, || zip(g, va, |x, y| x * y));
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, || g.map(|v| v * f)),
            Op::AddScalar(a) => self.accumulate(grads, *a, || g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.accumulate(grads, *a, || {
                    let mut out = vec![0.0; m * k];
                    matmul_nt_into(gd, vb.data(), &mut out, m, n, k);
                    from_parts(va.shape(), out)
                });
                self.accumulate(grads, *b, || {
                    let mut out = vec![0.0; k * n];
                    matmul_tn_into(va.data(), gd, &mut out, m, k, n);
                    from_parts(vb.shape(), out)
                });
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(grads, *x, || g.clone());
                let c = self.val(*bias).len();
                self.accumulate(grads, *bias, || {
                    let mut out = vec![0.0; c];
                    for row in gd.chunks(c) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    from_parts(self.val(*bias).shape(), out)
                });
            }
            Op::Relu(a) => {
                let x = self.val(*a);
                self.accumulate(grads, *a, || zip(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                self.accumulate(grads, *a, || zip(g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Abs(a) => {
                let x = self.val(*a);
                self.accumulate(grads, *a, || zip(g, x, |gv, xv| gv * sign(xv)));
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, || Tensor::full(self.val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let n = self.val(*a).len() as f64;
                let s = gd[0] / n;
                self.accumulate(grads, *a, || Tensor::full(self.val(*a).shape(), s));
            }
            Op::RowSum(a) => {
                let x = self.val(*a);
                let c = x.shape()[1];
                self.accumulate(grads, *a, || {
                    let data = gd.iter().flat_map(|&v| core::iter::repeat(v).take(c)).collect();
                    from_parts(x.shape(), data)
                });
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, || from_parts(self.val(*a).shape(), gd.to_vec()));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                window,
            } => {
                let x = self.val(*input);
                let wt = self.val(*weight);
                let (b, cin, h, w) = dims4(x);
                let (cout, _, _, _) = dims4(wt);
                let (_, _, ho, wo) = dims4(&node.value);
                let geom = ConvGeom {
                    b,
                    cin,
                    h,
                    w,
                    cout,
                    ho,
                    wo,
                    win: *window,
                };
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; x.len()];
                    geom.backward_input(gd, wt.data(), &mut out);
                    from_parts(x.shape(), out)
                });
                self.accumulate(grads, *weight, || {
                    let mut out = vec![0.0; wt.len()];
                    geom.backward_weight(gd, x.data(), &mut out);
                    from_parts(wt.shape(), out)
                });
                if let Some(bv) = bias {
                    self.accumulate(grads, *bv, || {
                        let mut out = vec![0.0; cout];
                        for bi in 0..b {
                            for (co, o) in out.iter_mut().enumerate() {
                                let base = (bi * cout + co) * ho * wo;
                                *o += gd[base..base + ho * wo].iter().sum::<f64>();
                            }
                        }
                        from_parts(self.val(*bv).shape(), out)
                    });
                }
            }
            Op::AvgPool2d { input, window } => {
                let x = self.val(*input);
                let (b, c, h, w) = dims4(x);
                let (_, _, ho, wo) = dims4(&node.value);
                let norm = 1.0 / (window.kernel * window.kernel) as f64;
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; x.len()];
                    for plane in 0..b * c {
                        let gi = &mut out[plane * h * w..(plane + 1) * h * w];
                        let go = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = go[oy * wo + ox] * norm;
                                for_window(*window, oy, ox, h, w, |iy, ix| gi[iy * w + ix] += v);
                            }
                        }
                    }
                    from_parts(x.shape(), out)
                });
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let gam = self.val(*gamma);
                let period = gam.len();
                let NormSaved {
                    outer,
                    channels,
                    inner,
                    ..
                } = *saved;
                let count = (outer * inner) as f64;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for o in 0..outer {
                    for c in 0..channels {
                        let base = (o * channels + c) * inner;
                        for s in base..base + inner {
                            sum_g[c] += gd[s];
                            sum_gx[c] += gd[s] * saved.x_hat[s];
                        }
                    }
                }
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; gd.len()];
                    for o in 0..outer {
                        for c in 0..channels {
                            let gm = gam.data()[c % period];
                            let base = (o * channels + c) * inner;
                            let is = saved.inv_std[c];
                            for s in base..base + inner {
                                out[s] = if saved.batch {
                                    gm * is / count
                                        * (count * gd[s] - sum_g[c] - saved.x_hat[s] * sum_gx[c])
                                } else {
                                    gm * is * gd[s]
                                };
                            }
                        }
                    }
                    from_parts(self.val(*input).shape(), out)
                });
                self.accumulate(grads, *gamma, || {
                    let mut out = vec![0.0; period];
                    for (c, v) in sum_gx.iter().enumerate() {
                        out[c % period] += v;
                    }
                    from_parts(gam.shape(), out)
                });
                self.accumulate(grads, *beta, || {
                    let mut out = vec![0.0; period];
                    for (c, v) in sum_g.iter().enumerate() {
                        out[c % period] += v;
                    }
                    from_parts(self.val(*beta).shape(), out)
                });
            }
            Op::GatherRows { input, rows } => {
                let x = self.val(*input);
                let c = x.shape()[1];
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; x.len()];
                    for (k, &i) in rows.iter().enumerate() {
                        for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                            *o += v;
                        }
                    }
                    from_parts(x.shape(), out)
                });
            }
            Op::ScatterRows { input, rows } => {
                let x = self.val(*input);
                let c = x.shape()[1];
                self.accumulate(grads, *input, || {
                    let mut out = Vec::with_capacity(x.len());
                    for &i in rows {
                        out.extend_from_slice(&gd[i * c..(i + 1) * c]);
                    }
                    from_parts(x.shape(), out)
                });
            }
            Op::GatherPillars { input, cells } => {
                let x = self.val(*input);
                let (_, c, h, w) = dims4(x);
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; x.len()];
                    for (k, &(bi, i, j)) in cells.iter().enumerate() {
                        for ch in 0..c {
                            out[((bi * c + ch) * h + i) * w + j] += gd[k * c + ch];
                        }
                    }
                    from_parts(x.shape(), out)
                });
            }
            Op::ConcatCols(a, b) => {
                let ca = self.val(*a).shape()[1];
                let cb = self.val(*b).shape()[1];
                let width = ca + cb;
                self.accumulate(grads, *a, || {
                    let data = gd.chunks(width).flat_map(|r| r[..ca].iter().copied()).collect();
                    from_parts(self.val(*a).shape(), data)
                });
                self.accumulate(grads, *b, || {
                    let data = gd.chunks(width).flat_map(|r| r[ca..].iter().copied()).collect();
                    from_parts(self.val(*b).shape(), data)
                });
            }
            Op::BlockMean { input, block } => {
                let x = self.val(*input);
                let c = x.shape()[1];
                let r = x.shape()[0];
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; x.len()];
                    for blk in 0..r / block {
                        let mut mean = vec![0.0; c];
                        for i in blk * block..(blk + 1) * block {
                            for (m, v) in mean.iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                                *m += v;
                            }
                        }
                        for m in &mut mean {
                            *m /= *block as f64;
                        }
                        for i in blk * block..(blk + 1) * block {
                            out[i * c..(i + 1) * c].copy_from_slice(&mean);
                        }
                    }
                    from_parts(x.shape(), out)
                });
            }
            Op::BlockLeftMul { input, matrix } => {
                let x = self.val(*input);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let n = matrix.shape()[0];
                self.accumulate(grads, *input, || {
                    let mut out = vec![0.0; x.len()];
                    for blk in 0..r / n {
                        let span = blk * n * c..(blk + 1) * n * c;
                        matmul_tn_into(matrix.data(), &gd[span.clone()], &mut out[span], n, n, c);
                    }
                    from_parts(x.shape(), out)
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, make: impl FnOnce() -> Tensor) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let contribution = make();
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot => *slot = Some(contribution),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`, the subgradient used for `|x|`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    from_parts(a.shape(), data)
}

fn from_parts(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape matches value shape")
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn for_window(win: Window, oy: usize, ox: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..win.kernel {
        let iy = (oy * win.stride + ky) as isize - win.padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..win.kernel {
            let ix = (ox * win.stride + kx) as isize - win.padding as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    win: Window,
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let (s, p) = (self.win.stride as isize, self.win.padding as isize);
        let k = k as isize;
        // smallest o with o*s + k - p >= 0
        let lo = if p - k > 0 { (p - k + s - 1) / s } else { 0 };
        // largest o with o*s + k - p <= in_len - 1
        let hi_num = in_len as isize - 1 - k + p;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    fn patch_rows(&self) -> usize {
        self.cin * self.win.kernel * self.win.kernel
    }

    /// Unfolds one sample into a `(cin*k*k) x (ho*wo)` patch matrix.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (k, p) = (self.win.kernel, self.ho * self.wo);
        col.iter_mut().for_each(|v| *v = 0.0);
        for ci in 0..self.cin {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, self.ho, self.h);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, self.wo, self.w);
                    let row = &mut col[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                    for oy in oy0..oy1 {
                        let iy = oy * self.win.stride + ky - self.win.padding;
                        let xrow = &xin[iy * self.w..(iy + 1) * self.w];
                        let orow = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in ox0..ox1 {
                            orow[ox] = xrow[ox * self.win.stride + kx - self.win.padding];
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: accumulates patches back into a sample.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (k, p) = (self.win.kernel, self.ho * self.wo);
        for ci in 0..self.cin {
            let xin = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                let (oy0, oy1) = self.valid_range(ky, self.ho, self.h);
                for kx in 0..k {
                    let (ox0, ox1) = self.valid_range(kx, self.wo, self.w);
                    let row = &col[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                    for oy in oy0..oy1 {
                        let iy = oy * self.win.stride + ky - self.win.padding;
                        let xrow = &mut xin[iy * self.w..(iy + 1) * self.w];
                        let grow = &row[oy * self.wo..(oy + 1) * self.wo];
                        for ox in ox0..ox1 {
                            xrow[ox * self.win.stride + kx - self.win.padding] += grow[ox];
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let (rows, p) = (self.patch_rows(), self.ho * self.wo);
        let mut col = vec![0.0; rows * p];
        for bi in 0..self.b {
            self.im2col(&x[bi * self.cin * self.h * self.w..(bi + 1) * self.cin * self.h * self.w], &mut col);
            let o = &mut out[bi * self.cout * p..(bi + 1) * self.cout * p];
            matmul_into(wt, &col, o, self.cout, rows, p);
        }
    }

    fn backward_input(&self, g: &[f64], wt: &[f64], out: &mut [f64]) {
        let (rows, p) = (self.patch_rows(), self.ho * self.wo);
        let mut col = vec![0.0; rows * p];
        for bi in 0..self.b {
            col.iter_mut().for_each(|v| *v = 0.0);
            matmul_tn_into(wt, &g[bi * self.cout * p..(bi + 1) * self.cout * p], &mut col, self.cout, rows, p);
            let size = self.cin * self.h * self.w;
            self.col2im(&col, &mut out[bi * size..(bi + 1) * size]);
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], out: &mut [f64]) {
        let (rows, p) = (self.patch_rows(), self.ho * self.wo);
        let mut col = vec![0.0; rows * p];
        for bi in 0..self.b {
            self.im2col(&x[bi * self.cin * self.h * self.w..(bi + 1) * self.cin * self.h * self.w], &mut col);
            matmul_nt_into(&g[bi * self.cout * p..(bi + 1) * self.cout * p], &col, out, self.cout, p, rows);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 9.0);
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn absolute_difference_gradient_is_sign() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(5.0));
        let d = g.sub(x, y).unwrap();
        let f = g.abs(d);
        let grads = g.backward(f).unwrap();
        assert_eq!(g.value(f).item().unwrap(), 3.0);
        assert_eq!(grads.get(x).unwrap().item().unwrap(), -1.0);
        assert_eq!(grads.get(y).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let f = g.abs(x);
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn non_scalar_backward_needs_seed() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 3.0);
        assert!(matches!(g.backward(y), Err(Error::NonScalarBackward(_))));
        let grads = g.backward_with_seed(y, t(&[2], &[1.0, -1.0])).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 3], &[0.0; 6]));
        let b = g.param(t(&[2, 3], &[0.0; 6]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {:?}", other),
        }
        let c = g.param(t(&[3], &[0.0; 3]));
        match g.add(a, c) {
            Err(Error::ShapeMismatch { op, .. }) => assert_eq!(op, "add"),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(4.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 4.0);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let mut k = [0.0; 9];
        k[4] = 1.0;
        let w = g.param(t(&[1, 1, 3, 3], &k));
        let y = g.conv2d(x, w, None, Window::new(3, 1, 1)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
        let y2 = g.conv2d(x, w, None, Window::new(3, 2, 1)).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y2).data(), &[1., 3., 7., 9.]);
    }

    #[test]
    fn avg_pool_counts_padding_as_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.avg_pool2d(x, Window::new(3, 1, 1)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 4.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn scatter_inverts_gather() {
        let mut g = Graph::new();
        let x = g.param(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let picked = g.gather_rows(x, &[2, 0]).unwrap();
        let back = g.scatter_rows(picked, &[2, 0], 3).unwrap();
        assert_eq!(g.value(back).data(), &[1., 2., 0., 0., 5., 6.]);
    }

    #[test]
    fn block_mean_averages_within_blocks() {
        let mut g = Graph::new();
        let x = g.param(t(&[4, 2], &[1., 3., 3., 1., 0., 0., 2., 4.]));
        let y = g.block_mean(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[2., 2., 2., 2., 1., 2., 1., 2.]);
    }

    #[test]
    fn batch_norm_rejects_single_row_in_training() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 3], &[1., 2., 3.]));
        let gm = g.param(Tensor::ones(&[3]));
        let bt = g.param(Tensor::zeros(&[3]));
        let r = g.batch_norm(x, gm, bt, &NormStats::Batch { eps: 1e-5 });
        assert!(matches!(r, Err(Error::BatchTooSmall(1))));
    }
}

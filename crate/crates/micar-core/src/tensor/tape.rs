//! The autodiff tape: forward ops record nodes, `backward` replays them in
//! reverse. Shape violations are programming errors and panic with both shapes
//! in the message; only `backward` itself returns a typed error (non-scalar
//! loss). One tape corresponds to one forward pass and is never shared across
//! training steps.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddRow { x: ValueId, row: ValueId },
    AffineScalar { x: ValueId, mul: f64 },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    Silu { x: ValueId },
    Gelu { x: ValueId },
    SoftmaxRows { x: ValueId },
    RmsNorm { x: ValueId, gain: ValueId, eps: f64 },
    Conv2d { x: ValueId, w: ValueId, stride: usize, padding: usize },
    BatchNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: f64, mean: Vec<f64>, var: Vec<f64>, batch_stats: bool },
    AdaptiveAvgPool { x: ValueId, grid: usize },
    UpsampleNearest { x: ValueId },
    MeanRows { x: ValueId },
    MaxRows { x: ValueId, argmax: Vec<usize> },
    ConcatCols { parts: Vec<ValueId> },
    SliceCols { x: ValueId, start: usize, len: usize },
    Reshape { x: ValueId },
    Embedding { table: ValueId, ids: Vec<usize> },
    Dropout { x: ValueId, mask: Vec<f64> },
    Rope { x: ValueId, positions: Vec<usize>, base: f64 },
    GatherRows { x: ValueId, rows: Vec<usize> },
    ScatterRows { x: ValueId, rows: Vec<usize> },
    SelectCol { x: ValueId, col: usize },
    ScaleRows { x: ValueId, s: ValueId },
    SumAll { x: ValueId },
    XLogX { x: ValueId },
    CrossEntropySum { logits: ValueId, targets: Vec<usize>, active: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a single forward pass and computes gradients on demand.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(shape: &[usize], what: &str) -> (usize, usize) {
    assert!(shape.len() == 2, "{what}: expected a 2-d tensor, got shape {shape:?}");
    (shape[0], shape[1])
}

fn dims3(shape: &[usize], what: &str) -> (usize, usize, usize) {
    assert!(shape.len() == 3, "{what}: expected a 3-d tensor, got shape {shape:?}");
    (shape[0], shape[1], shape[2])
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> ValueId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    fn requires(&self, id: ValueId) -> bool {
        self.node(id).requires_grad
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.node(id).data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: ValueId) -> f64 {
        let n = self.node(id);
        assert!(n.data.len() == 1, "scalar: tensor has shape {:?}", n.shape);
        n.data[0]
    }

    // ── node constructors ──

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> ValueId {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape.to_vec(), requires_grad, Op::Leaf)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor, requires_grad: bool) -> ValueId {
        self.push(t.data.clone(), t.shape.clone(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> ValueId {
        self.leaf(data, shape, false)
    }

    // ── linear algebra ──

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (m, k) = dims2(self.shape(a), "matmul lhs");
        let (k2, n) = dims2(self.shape(b), "matmul rhs");
        assert!(
            k == k2,
            "matmul: lhs shape {:?} incompatible with rhs shape {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut y = vec![0.0; m * n];
        let ad = self.data(a);
        let bd = self.data(b);
        for i in 0..m {
            let yr = &mut y[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let br = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    yr[j] += aip * br[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(y, vec![m, n], rg, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: ValueId) -> ValueId {
        let (r, c) = dims2(self.shape(x), "transpose");
        let xd = self.data(x);
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                y[j * r + i] = xd[i * c + j];
            }
        }
        let rg = self.requires(x);
        self.push(y, vec![c, r], rg, Op::Transpose { x })
    }

    // ── elementwise ──

    fn zip(&mut self, a: ValueId, b: ValueId, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> ValueId {
        assert!(
            self.shape(a) == self.shape(b),
            "{what}: shape {:?} does not match shape {:?}",
            self.shape(a),
            self.shape(b)
        );
        let y: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &z)| f(x, z))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.push(y, shape, rg, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.zip(a, b, "add", |x, z| x + z, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.zip(a, b, "sub", |x, z| x - z, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.zip(a, b, "mul", |x, z| x * z, Op::Mul { a, b })
    }

    /// Broadcast-add a length-`d` vector to every row of an `s x d` matrix.
    pub fn add_row(&mut self, x: ValueId, row: ValueId) -> ValueId {
        let (s, d) = dims2(self.shape(x), "add_row");
        assert!(
            numel(self.shape(row)) == d,
            "add_row: matrix shape {:?} incompatible with row shape {:?}",
            self.shape(x),
            self.shape(row)
        );
        let rd = self.data(row);
        let mut y = self.data(x).to_vec();
        for i in 0..s {
            for j in 0..d {
                y[i * d + j] += rd[j];
            }
        }
        let rg = self.requires(x) || self.requires(row);
        self.push(y, vec![s, d], rg, Op::AddRow { x, row })
    }

    /// `mul * x + add`, elementwise with scalar constants.
    pub fn affine_scalar(&mut self, x: ValueId, mul: f64, add: f64) -> ValueId {
        let y: Vec<f64> = self.data(x).iter().map(|&v| mul * v + add).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(y, shape, rg, Op::AffineScalar { x, mul })
    }

    fn map(&mut self, x: ValueId, f: impl Fn(f64) -> f64, op: Op) -> ValueId {
        let y: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(y, shape, rg, op)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.map(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        self.map(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn silu(&mut self, x: ValueId) -> ValueId {
        self.map(x, |v| v * sigmoid(v), Op::Silu { x })
    }

    pub fn gelu(&mut self, x: ValueId) -> ValueId {
        self.map(x, gelu, Op::Gelu { x })
    }

    /// `x * ln(x)` elementwise with the convention `0 * ln(0) = 0`.
    pub fn xlogx(&mut self, x: ValueId) -> ValueId {
        self.map(x, |v| if v == 0.0 { 0.0 } else { v * v.ln() }, Op::XLogX { x })
    }

    // ── normalization and softmax ──

    /// Row-wise softmax of a 2-d tensor, computed with max subtraction.
    pub fn softmax_rows(&mut self, x: ValueId) -> ValueId {
        let (s, d) = dims2(self.shape(x), "softmax_rows");
        let xd = self.data(x);
        let mut y = vec![0.0; s * d];
        for i in 0..s {
            let row = &xd[i * d..(i + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut y[i * d..(i + 1) * d];
            let mut z = 0.0;
            for j in 0..d {
                out[j] = (row[j] - m).exp();
                z += out[j];
            }
            for v in out.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.requires(x);
        self.push(y, vec![s, d], rg, Op::SoftmaxRows { x })
    }

    /// Row-wise RMS normalization with a learned per-column gain:
    /// `y[i][j] = gain[j] * x[i][j] / sqrt(mean_j(x[i][j]^2) + eps)`.
    pub fn rmsnorm(&mut self, x: ValueId, gain: ValueId, eps: f64) -> ValueId {
        let (s, d) = dims2(self.shape(x), "rmsnorm");
        assert!(
            numel(self.shape(gain)) == d,
            "rmsnorm: input shape {:?} incompatible with gain shape {:?}",
            self.shape(x),
            self.shape(gain)
        );
        let xd = self.data(x);
        let gd = self.data(gain);
        let mut y = vec![0.0; s * d];
        for i in 0..s {
            let row = &xd[i * d..(i + 1) * d];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for j in 0..d {
                y[i * d + j] = gd[j] * row[j] * inv;
            }
        }
        let rg = self.requires(x) || self.requires(gain);
        self.push(y, vec![s, d], rg, Op::RmsNorm { x, gain, eps })
    }

    // ── convolution and friends (3-d tensors are `channels x h x w`) ──

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, stride: usize, padding: usize) -> ValueId {
        let (ci, h, wd) = dims3(self.shape(x), "conv2d input");
        let ws = self.shape(w);
        assert!(
            ws.len() == 4 && ws[1] == ci,
            "conv2d: input shape {:?} incompatible with weight shape {ws:?}",
            self.shape(x)
        );
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(
            h + 2 * padding >= kh && wd + 2 * padding >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {:?}",
            self.shape(x)
        );
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let xd = self.data(x);
        let wv = self.data(w);
        let mut y = vec![0.0; co * oh * ow];
        for o in 0..co {
            for i in 0..ci {
                let wk = &wv[(o * ci + i) * kh * kw..(o * ci + i + 1) * kh * kw];
                for oy in 0..oh {
                    let yr = &mut y[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xr = &xd[(i * h + iy as usize) * wd..(i * h + iy as usize + 1) * wd];
                        for kx in 0..kw {
                            let wval = wk[ky * kw + kx];
                            let (lo, hi) = conv_span(ow, wd, stride, padding, kx);
                            for ox in lo..hi {
                                yr[ox] += wval * xr[ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w);
        self.push(y, vec![co, oh, ow], rg, Op::Conv2d { x, w, stride, padding })
    }

    /// Batch normalization over the spatial extent of each channel, using
    /// statistics of the current input. The computed per-channel mean and
    /// biased variance are retained on the node (see [`Tape::bn_stats`]) so
    /// the caller can maintain running statistics.
    pub fn batchnorm_train(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> ValueId {
        let (c, h, w) = dims3(self.shape(x), "batchnorm input");
        self.check_bn_params(c, gamma, beta);
        let n = h * w;
        let xd = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let plane = &xd[ch * n..(ch + 1) * n];
            let m = plane.iter().sum::<f64>() / n as f64;
            let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
            mean[ch] = m;
            var[ch] = v;
        }
        self.batchnorm_node(x, gamma, beta, eps, mean, var, true)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
    ) -> ValueId {
        let (c, _, _) = dims3(self.shape(x), "batchnorm input");
        self.check_bn_params(c, gamma, beta);
        assert!(
            mean.len() == c && var.len() == c,
            "batchnorm: {c} channels but {} running means / {} running vars",
            mean.len(),
            var.len()
        );
        self.batchnorm_node(x, gamma, beta, eps, mean, var, false)
    }

    fn check_bn_params(&self, c: usize, gamma: ValueId, beta: ValueId) {
        assert!(
            numel(self.shape(gamma)) == c && numel(self.shape(beta)) == c,
            "batchnorm: {c} channels but gamma shape {:?}, beta shape {:?}",
            self.shape(gamma),
            self.shape(beta)
        );
    }

    fn batchnorm_node(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        batch_stats: bool,
    ) -> ValueId {
        let (c, h, w) = dims3(self.shape(x), "batchnorm input");
        let n = h * w;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut y = vec![0.0; c * n];
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + eps).sqrt();
            for i in 0..n {
                y[ch * n + i] = gd[ch] * (xd[ch * n + i] - mean[ch]) * inv + bd[ch];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            y,
            vec![c, h, w],
            rg,
            Op::BatchNorm { x, gamma, beta, eps, mean, var, batch_stats },
        )
    }

    /// Per-channel mean and biased variance captured by a `batchnorm_train` node.
    pub fn bn_stats(&self, id: ValueId) -> (&[f64], &[f64]) {
        match &self.node(id).op {
            Op::BatchNorm { mean, var, batch_stats: true, .. } => (mean, var),
            other => panic!("bn_stats: node is not a batch-stats batchnorm ({other:?})"),
        }
    }

    /// Average-pool each channel onto a `grid x grid` output, PyTorch-style
    /// adaptive windows (`start = floor(i*h/g)`, `end = ceil((i+1)*h/g)`).
    pub fn adaptive_avg_pool(&mut self, x: ValueId, grid: usize) -> ValueId {
        let (c, h, w) = dims3(self.shape(x), "adaptive_avg_pool input");
        assert!(grid >= 1 && grid <= h && grid <= w, "adaptive_avg_pool: grid {grid} incompatible with input {:?}", self.shape(x));
        let xd = self.data(x);
        let mut y = vec![0.0; c * grid * grid];
        for ch in 0..c {
            for gy in 0..grid {
                let (y0, y1) = pool_span(gy, h, grid);
                for gx in 0..grid {
                    let (x0, x1) = pool_span(gx, w, grid);
                    let mut acc = 0.0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += xd[(ch * h + iy) * w + ix];
                        }
                    }
                    y[(ch * grid + gy) * grid + gx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.requires(x);
        self.push(y, vec![c, grid, grid], rg, Op::AdaptiveAvgPool { x, grid })
    }

    /// Nearest-neighbor upsample to `out_h x out_w` (source index `floor(y*h/out_h)`).
    pub fn upsample_nearest(&mut self, x: ValueId, out_h: usize, out_w: usize) -> ValueId {
        let (c, h, w) = dims3(self.shape(x), "upsample_nearest input");
        assert!(out_h >= h && out_w >= w, "upsample_nearest: target {out_h}x{out_w} smaller than input {:?}", self.shape(x));
        let xd = self.data(x);
        let mut y = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for oy in 0..out_h {
                let iy = oy * h / out_h;
                for ox in 0..out_w {
                    let ix = ox * w / out_w;
                    y[(ch * out_h + oy) * out_w + ox] = xd[(ch * h + iy) * w + ix];
                }
            }
        }
        let rg = self.requires(x);
        self.push(y, vec![c, out_h, out_w], rg, Op::UpsampleNearest { x })
    }

    // ── reductions and reshaping ──

    /// Column means of a 2-d tensor: `s x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: ValueId) -> ValueId {
        let (s, d) = dims2(self.shape(x), "mean_rows");
        let xd = self.data(x);
        let mut y = vec![0.0; d];
        for i in 0..s {
            for j in 0..d {
                y[j] += xd[i * d + j];
            }
        }
        y.iter_mut().for_each(|v| *v /= s as f64);
        let rg = self.requires(x);
        self.push(y, vec![1, d], rg, Op::MeanRows { x })
    }

    /// Column maxima of a 2-d tensor: `s x d -> 1 x d`. Ties keep the first row.
    pub fn max_rows(&mut self, x: ValueId) -> ValueId {
        let (s, d) = dims2(self.shape(x), "max_rows");
        assert!(s > 0, "max_rows: empty input");
        let xd = self.data(x);
        let mut y = xd[..d].to_vec();
        let mut argmax = vec![0usize; d];
        for i in 1..s {
            for j in 0..d {
                if xd[i * d + j] > y[j] {
                    y[j] = xd[i * d + j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.requires(x);
        self.push(y, vec![1, d], rg, Op::MaxRows { x, argmax })
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let y = vec![self.data(x).iter().sum()];
        let rg = self.requires(x);
        self.push(y, vec![1], rg, Op::SumAll { x })
    }

    /// Concatenate 2-d tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let (s, _) = dims2(self.shape(parts[0]), "concat_cols");
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (sp, dp) = dims2(self.shape(p), "concat_cols");
                assert!(
                    sp == s,
                    "concat_cols: row count mismatch between shapes {:?} and {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                );
                dp
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; s * total];
        let mut off = 0;
        for (&p, &dp) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for i in 0..s {
                y[i * total + off..i * total + off + dp].copy_from_slice(&pd[i * dp..(i + 1) * dp]);
            }
            off += dp;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(y, vec![s, total], rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Columns `start .. start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> ValueId {
        let (s, d) = dims2(self.shape(x), "slice_cols");
        assert!(
            start + len <= d,
            "slice_cols: columns {start}..{} out of range for shape {:?}",
            start + len,
            self.shape(x)
        );
        let xd = self.data(x);
        let mut y = vec![0.0; s * len];
        for i in 0..s {
            y[i * len..(i + 1) * len].copy_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let rg = self.requires(x);
        self.push(y, vec![s, len], rg, Op::SliceCols { x, start, len })
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> ValueId {
        assert!(
            numel(shape) == numel(self.shape(x)),
            "reshape: cannot view shape {:?} as {shape:?}",
            self.shape(x)
        );
        let y = self.data(x).to_vec();
        let rg = self.requires(x);
        self.push(y, shape.to_vec(), rg, Op::Reshape { x })
    }

    // ── lookups, routing, masks ──

    /// Gather rows of `table` by token id: `ids.len() x d`.
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> ValueId {
        let (v, d) = dims2(self.shape(table), "embedding table");
        let td = self.data(table);
        let mut y = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < v, "embedding: id {id} out of range for table shape {:?}", self.shape(table));
            y[i * d..(i + 1) * d].copy_from_slice(&td[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        self.push(y, vec![ids.len(), d], rg, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Inverted dropout: keep with probability `1 - rate` and scale kept
    /// entries by `1/(1-rate)`, so the expectation is the identity. `rate = 0`
    /// is the exact identity.
    pub fn dropout(&mut self, x: ValueId, rate: f64, rng: &mut ChaCha20Rng) -> ValueId {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0, 1)");
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self
            .data(x)
            .iter()
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let y: Vec<f64> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(y, shape, rg, Op::Dropout { x, mask })
    }

    /// Rotary position encoding over an `s x d` tensor (`d` even): pair
    /// `(x[2i], x[2i+1])` of the row at position `m` is rotated by
    /// `m * base^(-2i/d)`.
    pub fn rope(&mut self, x: ValueId, positions: &[usize], base: f64) -> ValueId {
        let (s, d) = dims2(self.shape(x), "rope");
        assert!(d % 2 == 0, "rope: width {d} must be even (shape {:?})", self.shape(x));
        assert!(
            positions.len() == s,
            "rope: {} positions for {s} rows (shape {:?})",
            positions.len(),
            self.shape(x)
        );
        let xd = self.data(x);
        let mut y = vec![0.0; s * d];
        for (i, &m) in positions.iter().enumerate() {
            for p in 0..d / 2 {
                let theta = base.powf(-2.0 * p as f64 / d as f64);
                let (sin, cos) = (m as f64 * theta).sin_cos();
                let a = xd[i * d + 2 * p];
                let b = xd[i * d + 2 * p + 1];
                y[i * d + 2 * p] = a * cos - b * sin;
                y[i * d + 2 * p + 1] = a * sin + b * cos;
            }
        }
        let rg = self.requires(x);
        self.push(y, vec![s, d], rg, Op::Rope { x, positions: positions.to_vec(), base })
    }

    /// Select rows of `x` by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: ValueId, rows: &[usize]) -> ValueId {
        let (s, d) = dims2(self.shape(x), "gather_rows");
        let xd = self.data(x);
        let mut y = vec![0.0; rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < s, "gather_rows: row {r} out of range for shape {:?}", self.shape(x));
            y[i * d..(i + 1) * d].copy_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let rg = self.requires(x);
        self.push(y, vec![rows.len(), d], rg, Op::GatherRows { x, rows: rows.to_vec() })
    }

    /// Place row `i` of `x` at row `rows[i]` of an otherwise-zero
    /// `out_rows x d` tensor. Row indices must be distinct.
    pub fn scatter_rows(&mut self, x: ValueId, rows: &[usize], out_rows: usize) -> ValueId {
        let (s, d) = dims2(self.shape(x), "scatter_rows");
        assert!(rows.len() == s, "scatter_rows: {} indices for {s} rows", rows.len());
        let mut seen = vec![false; out_rows];
        let xd = self.data(x);
        let mut y = vec![0.0; out_rows * d];
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < out_rows, "scatter_rows: row {r} out of range for {out_rows} output rows");
            assert!(!seen[r], "scatter_rows: duplicate target row {r}");
            seen[r] = true;
            y[r * d..(r + 1) * d].copy_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let rg = self.requires(x);
        self.push(y, vec![out_rows, d], rg, Op::ScatterRows { x, rows: rows.to_vec() })
    }

    /// Column `col` of a 2-d tensor as an `s x 1` tensor.
    pub fn select_col(&mut self, x: ValueId, col: usize) -> ValueId {
        let (s, d) = dims2(self.shape(x), "select_col");
        assert!(col < d, "select_col: column {col} out of range for shape {:?}", self.shape(x));
        let xd = self.data(x);
        let y: Vec<f64> = (0..s).map(|i| xd[i * d + col]).collect();
        let rg = self.requires(x);
        self.push(y, vec![s, 1], rg, Op::SelectCol { x, col })
    }

    /// Scale row `i` of `x` by `s[i]` (`s` is `n x 1`).
    pub fn scale_rows(&mut self, x: ValueId, s: ValueId) -> ValueId {
        let (n, d) = dims2(self.shape(x), "scale_rows");
        let (ns, ds) = dims2(self.shape(s), "scale_rows scales");
        assert!(
            ns == n && ds == 1,
            "scale_rows: input shape {:?} incompatible with scale shape {:?}",
            self.shape(x),
            self.shape(s)
        );
        let xd = self.data(x);
        let sd = self.data(s);
        let mut y = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                y[i * d + j] = xd[i * d + j] * sd[i];
            }
        }
        let rg = self.requires(x) || self.requires(s);
        self.push(y, vec![n, d], rg, Op::ScaleRows { x, s })
    }

    /// Summed token cross-entropy: for each row `i` with `active[i]`, adds
    /// `logsumexp(logits[i]) - logits[i][targets[i]]`. Inactive rows (padding)
    /// contribute nothing, in value or gradient.
    pub fn cross_entropy_sum(&mut self, logits: ValueId, targets: &[usize], active: &[bool]) -> ValueId {
        let (s, v) = dims2(self.shape(logits), "cross_entropy_sum");
        assert!(
            targets.len() == s && active.len() == s,
            "cross_entropy_sum: {s} rows but {} targets / {} active flags",
            targets.len(),
            active.len()
        );
        let ld = self.data(logits);
        let mut loss = 0.0;
        for i in 0..s {
            if !active[i] {
                continue;
            }
            assert!(
                targets[i] < v,
                "cross_entropy_sum: target {} out of range for {v} classes",
                targets[i]
            );
            let row = &ld[i * v..(i + 1) * v];
            loss += logsumexp(row) - row[targets[i]];
        }
        let rg = self.requires(logits);
        self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropySum { logits, targets: targets.to_vec(), active: active.to_vec() },
        )
    }

    // ── backward ──

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate on every
    /// node that (transitively) requires grad; leaves not on the path keep no
    /// gradient and can be treated as zero.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        let n = self.node(loss);
        if n.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            for (pid, contrib) in self.local_grads(i) {
                self.add_grad(pid, &contrib);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, id: ValueId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (dst, src) in g.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    /// Gradient contributions of node `i` to each of its parents.
    fn local_grads(&self, i: usize) -> Vec<(ValueId, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = node.grad.as_ref().expect("local_grads on node without gradient");
        let mut out: Vec<(ValueId, Vec<f64>)> = Vec::new();
        // Convention below: `g` is dLoss/d(this node); each arm pushes
        // dLoss/d(parent) for parents that require grad.
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(self.shape(*a), "matmul lhs");
                let n = self.shape(*b)[1];
                let ad = self.data(*a);
                let bd = self.data(*b);
                if self.requires(*a) {
                    // da[i][p] = sum_j g[i][j] * b[p][j]
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gr[j] * br[j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    out.push((*a, da));
                }
                if self.requires(*b) {
                    // db[p][j] = sum_i a[i][p] * g[i][j]
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let dbr = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbr[j] += aip * gr[j];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Transpose { x } => {
                let (c, r) = dims2(&node.shape, "transpose output");
                let mut dx = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dx[j * c + i] = g[i * r + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    out.push((*a, g.clone()));
                }
                if self.requires(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    out.push((*a, g.clone()));
                }
                if self.requires(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    out.push((*a, g.iter().zip(self.data(*b)).map(|(&gv, &bv)| gv * bv).collect()));
                }
                if self.requires(*b) {
                    out.push((*b, g.iter().zip(self.data(*a)).map(|(&gv, &av)| gv * av).collect()));
                }
            }
            Op::AddRow { x, row } => {
                let (s, d) = dims2(&node.shape, "add_row output");
                if self.requires(*x) {
                    out.push((*x, g.clone()));
                }
                if self.requires(*row) {
                    let mut dr = vec![0.0; d];
                    for i in 0..s {
                        for j in 0..d {
                            dr[j] += g[i * d + j];
                        }
                    }
                    out.push((*row, dr));
                }
            }
            Op::AffineScalar { x, mul } => {
                out.push((*x, g.iter().map(|v| v * mul).collect()));
            }
            Op::Relu { x } => {
                let xd = self.data(*x);
                out.push((*x, g.iter().zip(xd).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect()));
            }
            Op::Sigmoid { x } => {
                // y is this node's data; dy/dx = y(1-y)
                let dx = g.iter().zip(&node.data).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
                out.push((*x, dx));
            }
            Op::Silu { x } => {
                let xd = self.data(*x);
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                    .collect();
                out.push((*x, dx));
            }
            Op::Gelu { x } => {
                let xd = self.data(*x);
                out.push((*x, g.iter().zip(xd).map(|(&gv, &xv)| gv * gelu_grad(xv)).collect()));
            }
            Op::XLogX { x } => {
                let xd = self.data(*x);
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv == 0.0 { 0.0 } else { gv * (xv.ln() + 1.0) })
                    .collect();
                out.push((*x, dx));
            }
            Op::SoftmaxRows { x } => {
                let (s, d) = dims2(&node.shape, "softmax output");
                let y = &node.data;
                let mut dx = vec![0.0; s * d];
                for i in 0..s {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dx[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::RmsNorm { x, gain, eps } => {
                let (s, d) = dims2(&node.shape, "rmsnorm output");
                let xd = self.data(*x);
                let gd = self.data(*gain);
                if self.requires(*x) {
                    let mut dx = vec![0.0; s * d];
                    for i in 0..s {
                        let row = &xd[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let r = (ms + eps).sqrt();
                        let inv = 1.0 / r;
                        let inv3 = 1.0 / (r * r * r);
                        let dot: f64 = (0..d).map(|j| gr[j] * gd[j] * row[j]).sum();
                        for j in 0..d {
                            dx[i * d + j] = gd[j] * gr[j] * inv - row[j] * dot * inv3 / d as f64;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.requires(*gain) {
                    let mut dg = vec![0.0; d];
                    for i in 0..s {
                        let row = &xd[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let inv = 1.0 / (ms + eps).sqrt();
                        for j in 0..d {
                            dg[j] += gr[j] * row[j] * inv;
                        }
                    }
                    out.push((*gain, dg));
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let (ci, h, wd) = dims3(self.shape(*x), "conv2d input");
                let ws = self.shape(*w);
                let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (node.shape[1], node.shape[2]);
                let xd = self.data(*x);
                let wv = self.data(*w);
                let need_x = self.requires(*x);
                let need_w = self.requires(*w);
                let mut dx = if need_x { vec![0.0; ci * h * wd] } else { Vec::new() };
                let mut dw = if need_w { vec![0.0; co * ci * kh * kw] } else { Vec::new() };
                for o in 0..co {
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let widx = ((o * ci + i) * kh + ky) * kw + kx;
                                let wval = wv[widx];
                                let (ylo, yhi) = conv_span(oh, h, *stride, *padding, ky);
                                let (xlo, xhi) = conv_span(ow, wd, *stride, *padding, kx);
                                let mut wacc = 0.0;
                                for oy in ylo..yhi {
                                    let iy = oy * stride + ky - padding;
                                    let grow = &g[(o * oh + oy) * ow..(o * oh + oy + 1) * ow];
                                    let xrow = (i * h + iy) * wd;
                                    for ox in xlo..xhi {
                                        let ix = ox * stride + kx - padding;
                                        let gv = grow[ox];
                                        if need_w {
                                            wacc += gv * xd[xrow + ix];
                                        }
                                        if need_x {
                                            dx[xrow + ix] += gv * wval;
                                        }
                                    }
                                }
                                if need_w {
                                    dw[widx] = wacc;
                                }
                            }
                        }
                    }
                }
                if need_x {
                    out.push((*x, dx));
                }
                if need_w {
                    out.push((*w, dw));
                }
            }
            Op::BatchNorm { x, gamma, beta, eps, mean, var, batch_stats } => {
                let (c, h, w) = dims3(&node.shape, "batchnorm output");
                let n = h * w;
                let xd = self.data(*x);
                let gd = self.data(*gamma);
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut dx = if need_x { vec![0.0; c * n] } else { Vec::new() };
                let mut dgamma = if need_g { vec![0.0; c] } else { Vec::new() };
                let mut dbeta = if need_b { vec![0.0; c] } else { Vec::new() };
                for ch in 0..c {
                    let inv = 1.0 / (var[ch] + eps).sqrt();
                    let xs = &xd[ch * n..(ch + 1) * n];
                    let gs = &g[ch * n..(ch + 1) * n];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..n {
                        let xhat = (xs[i] - mean[ch]) * inv;
                        sum_g += gs[i];
                        sum_gx += gs[i] * xhat;
                    }
                    if need_g {
                        dgamma[ch] = sum_gx;
                    }
                    if need_b {
                        dbeta[ch] = sum_g;
                    }
                    if need_x {
                        let dxs = &mut dx[ch * n..(ch + 1) * n];
                        if *batch_stats {
                            // statistics depend on x: standard train-mode rule
                            let mg = sum_g / n as f64;
                            let mgx = sum_gx / n as f64;
                            for i in 0..n {
                                let xhat = (xs[i] - mean[ch]) * inv;
                                dxs[i] = gd[ch] * inv * (gs[i] - mg - xhat * mgx);
                            }
                        } else {
                            for i in 0..n {
                                dxs[i] = gs[i] * gd[ch] * inv;
                            }
                        }
                    }
                }
                if need_x {
                    out.push((*x, dx));
                }
                if need_g {
                    out.push((*gamma, dgamma));
                }
                if need_b {
                    out.push((*beta, dbeta));
                }
            }
            Op::AdaptiveAvgPool { x, grid } => {
                let (c, h, w) = dims3(self.shape(*x), "adaptive_avg_pool input");
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for gy in 0..*grid {
                        let (y0, y1) = pool_span(gy, h, *grid);
                        for gx in 0..*grid {
                            let (x0, x1) = pool_span(gx, w, *grid);
                            let share = g[(ch * grid + gy) * grid + gx] / ((y1 - y0) * (x1 - x0)) as f64;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dx[(ch * h + iy) * w + ix] += share;
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::UpsampleNearest { x } => {
                let (c, h, w) = dims3(self.shape(*x), "upsample input");
                let (_, oh, ow) = dims3(&node.shape, "upsample output");
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        let iy = oy * h / oh;
                        for ox in 0..ow {
                            let ix = ox * w / ow;
                            dx[(ch * h + iy) * w + ix] += g[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MeanRows { x } => {
                let (s, d) = dims2(self.shape(*x), "mean_rows input");
                let mut dx = vec![0.0; s * d];
                for i in 0..s {
                    for j in 0..d {
                        dx[i * d + j] = g[j] / s as f64;
                    }
                }
                out.push((*x, dx));
            }
            Op::MaxRows { x, argmax } => {
                let (s, d) = dims2(self.shape(*x), "max_rows input");
                let mut dx = vec![0.0; s * d];
                for j in 0..d {
                    dx[argmax[j] * d + j] = g[j];
                }
                out.push((*x, dx));
            }
            Op::ConcatCols { parts } => {
                let (s, total) = dims2(&node.shape, "concat output");
                let mut off = 0;
                for &p in parts {
                    let dp = self.shape(p)[1];
                    if self.requires(p) {
                        let mut d = vec![0.0; s * dp];
                        for i in 0..s {
                            d[i * dp..(i + 1) * dp]
                                .copy_from_slice(&g[i * total + off..i * total + off + dp]);
                        }
                        out.push((p, d));
                    }
                    off += dp;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (s, d) = dims2(self.shape(*x), "slice_cols input");
                let mut dx = vec![0.0; s * d];
                for i in 0..s {
                    dx[i * d + start..i * d + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => {
                out.push((*x, g.clone()));
            }
            Op::Embedding { table, ids } => {
                let (v, d) = dims2(self.shape(*table), "embedding table");
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect()));
            }
            Op::Rope { x, positions, base } => {
                let (_, d) = dims2(&node.shape, "rope output");
                let mut dx = vec![0.0; g.len()];
                for (i, &m) in positions.iter().enumerate() {
                    for p in 0..d / 2 {
                        let theta = base.powf(-2.0 * p as f64 / d as f64);
                        let (sin, cos) = (m as f64 * theta).sin_cos();
                        let ga = g[i * d + 2 * p];
                        let gb = g[i * d + 2 * p + 1];
                        // transpose of the forward rotation
                        dx[i * d + 2 * p] = ga * cos + gb * sin;
                        dx[i * d + 2 * p + 1] = -ga * sin + gb * cos;
                    }
                }
                out.push((*x, dx));
            }
            Op::GatherRows { x, rows } => {
                let (s, d) = dims2(self.shape(*x), "gather_rows input");
                let mut dx = vec![0.0; s * d];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        dx[r * d + j] += g[i * d + j];
                    }
                }
                out.push((*x, dx));
            }
            Op::ScatterRows { x, rows } => {
                let (s, d) = dims2(self.shape(*x), "scatter_rows input");
                let mut dx = vec![0.0; s * d];
                for (i, &r) in rows.iter().enumerate() {
                    dx[i * d..(i + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                }
                out.push((*x, dx));
            }
            Op::SelectCol { x, col } => {
                let (s, d) = dims2(self.shape(*x), "select_col input");
                let mut dx = vec![0.0; s * d];
                for i in 0..s {
                    dx[i * d + col] = g[i];
                }
                out.push((*x, dx));
            }
            Op::ScaleRows { x, s } => {
                let (n, d) = dims2(self.shape(*x), "scale_rows input");
                let xd = self.data(*x);
                let sd = self.data(*s);
                if self.requires(*x) {
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            dx[i * d + j] = g[i * d + j] * sd[i];
                        }
                    }
                    out.push((*x, dx));
                }
                if self.requires(*s) {
                    let mut ds = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..d {
                            ds[i] += g[i * d + j] * xd[i * d + j];
                        }
                    }
                    out.push((*s, ds));
                }
            }
            Op::SumAll { x } => {
                let n = numel(self.shape(*x));
                out.push((*x, vec![g[0]; n]));
            }
            Op::CrossEntropySum { logits, targets, active } => {
                let (s, v) = dims2(self.shape(*logits), "cross_entropy logits");
                let ld = self.data(*logits);
                let mut dl = vec![0.0; s * v];
                for i in 0..s {
                    if !active[i] {
                        continue;
                    }
                    let row = &ld[i * v..(i + 1) * v];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - m).exp() / z;
                        dl[i * v + j] = g[0] * (p - if j == targets[i] { 1.0 } else { 0.0 });
                    }
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}

// ── scalar helpers ──

/// Numerically stable logistic function; saturates to exactly 0.0 / 1.0 in
/// f64 for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// tanh-form GELU.
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Input range `[start, end)` covered by adaptive-pool cell `i` of `g` over an
/// axis of length `n`: `floor(i*n/g) .. ceil((i+1)*n/g)`.
fn pool_span(i: usize, n: usize, g: usize) -> (usize, usize) {
    (i * n / g, ((i + 1) * n + g - 1) / g)
}

/// Output positions `lo..hi` for which `o*stride + k - padding` lands inside
/// `0..input` (shared by conv2d forward and backward).
fn conv_span(out: usize, input: usize, stride: usize, padding: usize, k: usize) -> (usize, usize) {
    let lo = if k >= padding { 0 } else { (padding - k + stride - 1) / stride };
    if input + padding < k + 1 {
        return (0, 0);
    }
    let hi_incl = (input + padding - k - 1) / stride;
    (lo.min(out), (hi_incl + 1).min(out))
}

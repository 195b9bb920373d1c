//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a record holding its
//! inputs and whatever it needs for the backward rule. Records are stored in
//! creation order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.

use super::kernels::{self, Tap};
use super::tensor::{ShapeError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A box in normalized `[x0, y0, x1, y1]` form, as consumed by sampling ops.
pub type BoxCoords = [f64; 4];

/// Default batch-norm variance floor. Small enough that normalized outputs
/// have unit variance to ~1e-8 for inputs with variance of order one.
pub const BATCH_NORM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum BackwardError {
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var> },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Upsample2(Var),
    AvgPool2(Var),
    SumAxis(Var, usize),
    SumAll(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Reshape(Var),
    TileSpatial(Var),
    GridSample { source: Var, boxes: Vec<BoxCoords>, box_var: Option<Var> },
    CropResize { images: Var, crops: Vec<(usize, BoxCoords)> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` as a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::new(op, "operands differ in shape", &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, ShapeError> {
        if self.shape(a) != c.shape() {
            return Err(ShapeError::new("mul_const", "operands differ in shape", &[self.shape(a), c.shape()]));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(ShapeError::new("matmul", "expected m×k and k×n", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, ShapeError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(ShapeError::new("transpose", "expected a matrix", &[s]));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), &[a]))
    }

    /// Adds a length-`m` bias to every row of an `n × m` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, ShapeError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(ShapeError::new("add_row_bias", "expected n×m and m", &[sx, sb]));
        }
        let m = sx[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bias[i % m];
        }
        Ok(self.push(v, Op::AddRowBias(x, b), &[x, b]))
    }

    /// Affine layer: `x · w + b` for `x: n × in`, `w: in × out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Stride-1 convolution with size-preserving zero padding.
    /// `input: N × C × H × W`, `weight: O × C × k × k` (k odd), `bias: O`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, ShapeError> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || sw[1] != si[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(ShapeError::new("conv2d", "expected N×C×H×W input and O×C×k×k odd kernel", &[&si, &sw]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(ShapeError::new("conv2d", "bias length must equal output channels", &[&sw, self.shape(b)]));
            }
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (o, k) = (sw[0], sw[2]);
        let hw = h * w;
        let ckk = c * k * k;
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![0.0; n * o * hw];
        let mut cols = vec![0.0; ckk * hw];
        for b in 0..n {
            kernels::im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, w, k, &mut cols);
            kernels::gemm(o, ckk, hw, wt, false, &cols, false, &mut out[b * o * hw..(b + 1) * o * hw], 0.0);
        }
        if let Some(bv) = bias {
            let bias = self.value(bv).data();
            for (i, plane) in out.chunks_mut(hw).enumerate() {
                let bo = bias[i % o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(Tensor::new(&[n, o, h, w], out)?, Op::Conv2d { input, weight, bias }, &inputs))
    }

    /// Side of every rectifier, absolute-value and clamp input recorded so
    /// far. Two evaluations with equal patterns lie on the same smooth piece
    /// of the function.
    pub fn kink_pattern(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::LeakyRelu(a, slope) if *slope != 1.0 => out.extend(self.value(*a).data().iter().map(|&x| (x > 0.0) as u8)),
                Op::Abs(a) => out.extend(self.value(*a).data().iter().map(|&x| (x >= 0.0) as u8)),
                Op::Clamp(a, lo, hi) => out.extend(self.value(*a).data().iter().map(|&x| (x >= *lo) as u8 + (x > *hi) as u8)),
                _ => {}
            }
        }
        out
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi), &[a])
    }

    /// Batch normalization over every axis except 1, using the statistics
    /// of the current batch. `input: N × C [× H × W]`, `gamma, beta: C`.
    pub fn batch_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, ShapeError> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(ShapeError::new(
                "batch_norm",
                "expected N×C[×…] input with length-C affine parameters",
                &[&s, self.shape(gamma), self.shape(beta)],
            ));
        }
        let (n, c, inner) = axis_split(&s, 1);
        let m = (n * inner) as f64;
        let x = self.value(input).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let idx = |b: usize, i: usize| (b * c + ch) * inner + i;
            let mut mean = 0.0;
            for b in 0..n {
                for i in 0..inner {
                    mean += x[idx(b, i)];
                }
            }
            mean /= m;
            let mut var = 0.0;
            for b in 0..n {
                for i in 0..inner {
                    let d = x[idx(b, i)] - mean;
                    var += d * d;
                }
            }
            var /= m;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for b in 0..n {
                for i in 0..inner {
                    let j = idx(b, i);
                    xhat[j] = (x[j] - mean) * is;
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        let xhat = Tensor::new(&s, xhat)?;
        Ok(self.push(Tensor::new(&s, out)?, Op::BatchNorm { input, gamma, beta, xhat, inv_std }, &[input, gamma, beta]))
    }

    fn check_spatial(&self, op: &'static str, a: Var) -> Result<(usize, usize, usize), ShapeError> {
        let s = self.shape(a);
        if s.len() < 3 {
            return Err(ShapeError::new(op, "expected …×H×W", &[s]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((s[..s.len() - 2].iter().product(), h, w))
    }

    /// Nearest-neighbour ×2 upsampling of the last two axes.
    pub fn upsample2(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (planes, h, w) = self.check_spatial("upsample2", a)?;
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; planes * h2 * w2];
        for p in 0..planes {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[(p * h2 + y) * w2 + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Upsample2(a), &[a]))
    }

    /// 2×2 average pooling of the last two axes (both must be even).
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (planes, h, w) = self.check_spatial("avg_pool2", a)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(ShapeError::new("avg_pool2", "spatial size must be even", &[self.shape(a)]));
        }
        let src = self.value(a).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * h2 * w2];
        for p in 0..planes {
            for y in 0..h2 {
                for x in 0..w2 {
                    let base = (p * h + 2 * y) * w + 2 * x;
                    out[(p * h2 + y) * w2 + x] = 0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        let r = shape.len();
        shape[r - 2] = h2;
        shape[r - 1] = w2;
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2(a), &[a]))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(ShapeError::new("sum_axis", format!("axis {axis} out of range"), &[&s]));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis(a, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, ShapeError> {
        let first = parts.first().ok_or_else(|| ShapeError::new("concat", "no inputs", &[]))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(ShapeError::new("concat", format!("axis {axis} out of range"), &[&s0]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| self.shape(*p)).collect();
                return Err(ShapeError::new("concat", format!("shapes disagree off axis {axis}"), &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let d = self.shape(*p)[axis];
                out.extend_from_slice(&self.value(*p).data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(ShapeError::new("slice", format!("range {start}..{} on axis {axis}", start + len), &[&s]));
        }
        let (outer, dim, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Rows of `a` (leading axis) picked by `idx`; doubles as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(ShapeError::new("gather_rows", "row index out of range", &[&s]));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(Tensor::new(&shape, out)?, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Embedding lookup: rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, ShapeError> {
        self.gather_rows(table, ids)
    }

    /// Output row `idx[i]` accumulates input row `i`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || idx.len() != s[0] || idx.iter().any(|&i| i >= rows) {
            return Err(ShapeError::new("scatter_add_rows", "index list does not fit", &[&s]));
        }
        let inner: usize = s[1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * inner];
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * inner..(i + 1) * inner].iter_mut().zip(&src[r * inner..(r + 1) * inner]) {
                *o += v;
            }
        }
        let mut shape = s;
        shape[0] = rows;
        Ok(self.push(Tensor::new(&shape, out)?, Op::ScatterAddRows(a, idx.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Repeats each entry of an `N × C` matrix over an `H × W` grid.
    pub fn tile_spatial(&mut self, a: Var, h: usize, w: usize) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(ShapeError::new("tile_spatial", "expected N×C", &[&s]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() * h * w);
        for &v in src {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        Ok(self.push(Tensor::new(&[s[0], s[1], h, w], out)?, Op::TileSpatial(a), &[a]))
    }

    /// Stretches each `C × h × w` source into its box on an `out_h × out_w`
    /// canvas with bilinear interpolation, zeros outside the box. Box
    /// coordinates are constants.
    pub fn grid_sample(&mut self, source: Var, boxes: &[BoxCoords], out_h: usize, out_w: usize) -> Result<Var, ShapeError> {
        self.grid_sample_impl(source, boxes.to_vec(), None, out_h, out_w)
    }

    /// [`Tape::grid_sample`] with box coordinates taken from `boxes: N × 4`
    /// so that gradients also reach them (almost everywhere; the box edges
    /// themselves are discontinuities).
    pub fn grid_sample_with_box_grad(&mut self, source: Var, boxes: Var, out_h: usize, out_w: usize) -> Result<Var, ShapeError> {
        let sb = self.shape(boxes);
        if sb.len() != 2 || sb[1] != 4 {
            return Err(ShapeError::new("grid_sample", "boxes must be N×4", &[sb]));
        }
        let coords = self.value(boxes).data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        self.grid_sample_impl(source, coords, Some(boxes), out_h, out_w)
    }

    fn grid_sample_impl(
        &mut self,
        source: Var,
        boxes: Vec<BoxCoords>,
        box_var: Option<Var>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, ShapeError> {
        let s = self.shape(source).to_vec();
        if s.len() != 4 || s[0] != boxes.len() {
            return Err(ShapeError::new("grid_sample", format!("expected N×C×h×w source for {} boxes", boxes.len()), &[&s]));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.value(source).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for (b, bx) in boxes.iter().enumerate() {
            for y in 0..out_h {
                let Some(v) = kernels::warp_coord((y as f64 + 0.5) / out_h as f64, bx[1], bx[3], h) else { continue };
                let ty = kernels::tap(v, h);
                for x in 0..out_w {
                    let Some(u) = kernels::warp_coord((x as f64 + 0.5) / out_w as f64, bx[0], bx[2], w) else {
                        continue;
                    };
                    let tx = kernels::tap(u, w);
                    for ch in 0..c {
                        let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                        out[((b * c + ch) * out_h + y) * out_w + x] = kernels::bilinear(plane, w, ty, tx);
                    }
                }
            }
        }
        let mut inputs = vec![source];
        inputs.extend(box_var);
        Ok(self.push(Tensor::new(&[n, c, out_h, out_w], out)?, Op::GridSample { source, boxes, box_var }, &inputs))
    }

    /// Bilinear resample of box regions of `images: B × C × H × W` to
    /// `size × size` crops. Each crop names its source image.
    pub fn crop_resize(&mut self, images: Var, crops: &[(usize, BoxCoords)], size: usize) -> Result<Var, ShapeError> {
        let s = self.shape(images).to_vec();
        if s.len() != 4 || crops.iter().any(|(i, _)| *i >= s[0]) {
            return Err(ShapeError::new("crop_resize", "expected B×C×H×W images and in-range image indices", &[&s]));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let src = self.value(images).data();
        let mut out = vec![0.0; crops.len() * c * size * size];
        for (k, (img, bx)) in crops.iter().enumerate() {
            for y in 0..size {
                let ty = crop_tap(y, size, bx[1], bx[3], h);
                for x in 0..size {
                    let tx = crop_tap(x, size, bx[0], bx[2], w);
                    for ch in 0..c {
                        let plane = &src[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                        out[((k * c + ch) * size + y) * size + x] = kernels::bilinear(plane, w, ty, tx);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(&[crops.len(), c, size, size], out)?,
            Op::CropResize { images, crops: crops.to_vec() },
            &[images],
        ))
    }

    /// Mean softmax cross-entropy of `logits: M × K` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, ShapeError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) || labels.is_empty() {
            return Err(ShapeError::new("softmax_cross_entropy", format!("{} labels", labels.len()), &[&s]));
        }
        let k = s[1];
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / denom;
            }
            loss += denom.ln() + max - row[label];
        }
        let m = labels.len() as f64;
        let probs = Tensor::new(&s, probs)?;
        Ok(self.push(
            Tensor::scalar(loss / m),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, BackwardError> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(BackwardError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        // Mutable gradient buffer for an input, or None when it needs no gradient.
        macro_rules! buf {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())).data_mut())
                } else {
                    None
                }
            }};
        }
        macro_rules! elementwise {
            ($a:expr, |$k:ident, $gv:ident| $e:expr) => {{
                if let Some(da) = buf!($a) {
                    for ($k, (d, &$gv)) in da.iter_mut().zip(gd).enumerate() {
                        *d += $e;
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                elementwise!(*a, |_k, gv| gv);
                elementwise!(*b, |_k, gv| gv);
            }
            Op::Sub(a, b) => {
                elementwise!(*a, |_k, gv| gv);
                elementwise!(*b, |_k, gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                elementwise!(*a, |k, gv| gv * bv[k]);
                elementwise!(*b, |k, gv| gv * av[k]);
            }
            Op::MulConst(a, c) => {
                let cv = c.data();
                elementwise!(*a, |k, gv| gv * cv[k]);
            }
            Op::Scale(a, s) => elementwise!(*a, |_k, gv| gv * s),
            Op::AddScalar(a) => elementwise!(*a, |_k, gv| gv),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = buf!(*a) {
                    kernels::gemm(m, n, k, gd, false, bv, true, da, 1.0);
                }
                if let Some(db) = buf!(*b) {
                    kernels::gemm(k, m, n, av, true, gd, false, db, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(da) = buf!(*a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                elementwise!(*x, |_k, gv| gv);
                let m = self.shape(*b)[0];
                if let Some(db) = buf!(*b) {
                    for (k, gv) in gd.iter().enumerate() {
                        db[k % m] += gv;
                    }
                }
            }
            Op::Conv2d { input, weight, bias } => {
                let (si, sw) = (self.shape(*input), self.shape(*weight));
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (o, k) = (sw[0], sw[2]);
                let hw = h * w;
                let ckk = c * k * k;
                if let Some(bv) = bias {
                    if let Some(db) = buf!(*bv) {
                        for (p, plane) in gd.chunks(hw).enumerate() {
                            db[p % o] += plane.iter().sum::<f64>();
                        }
                    }
                }
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let need_w = self.nodes[weight.0].requires_grad;
                let need_x = self.nodes[input.0].requires_grad;
                let mut cols = vec![0.0; ckk * hw];
                for b in 0..n {
                    let gout = &gd[b * o * hw..(b + 1) * o * hw];
                    if need_w {
                        kernels::im2col(&x[b * c * hw..(b + 1) * c * hw], c, h, w, k, &mut cols);
                        let dw = buf!(*weight).expect("weight requires grad");
                        kernels::gemm(o, hw, ckk, gout, false, &cols, true, dw, 1.0);
                    }
                    if need_x {
                        kernels::gemm(ckk, o, hw, wt, true, gout, false, &mut cols, 0.0);
                        let dx = buf!(*input).expect("input requires grad");
                        kernels::col2im_add(&cols, c, h, w, k, &mut dx[b * c * hw..(b + 1) * c * hw]);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a).data();
                elementwise!(*a, |k, gv| if av[k] > 0.0 { gv } else { slope * gv });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                elementwise!(*a, |k, gv| gv * y[k] * (1.0 - y[k]));
            }
            Op::Tanh(a) => {
                let y = out.data();
                elementwise!(*a, |k, gv| gv * (1.0 - y[k] * y[k]));
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                elementwise!(*a, |k, gv| gv * if av[k] > 0.0 { 1.0 } else if av[k] < 0.0 { -1.0 } else { 0.0 });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                elementwise!(*a, |k, gv| 2.0 * gv * av[k]);
            }
            Op::Ln(a) => {
                let av = self.value(*a).data();
                elementwise!(*a, |k, gv| gv / av[k]);
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a).data();
                elementwise!(*a, |k, gv| if av[k] >= *lo && av[k] <= *hi { gv } else { 0.0 });
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std } => {
                let s = self.shape(*input);
                let (n, c, inner) = axis_split(s, 1);
                let m = (n * inner) as f64;
                let xh = xhat.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in 0..inner {
                            let j = (b * c + ch) * inner + i;
                            sum_g[ch] += gd[j];
                            sum_gx[ch] += gd[j] * xh[j];
                        }
                    }
                }
                if let Some(dg) = buf!(*gamma) {
                    for ch in 0..c {
                        dg[ch] += sum_gx[ch];
                    }
                }
                if let Some(db) = buf!(*beta) {
                    for ch in 0..c {
                        db[ch] += sum_g[ch];
                    }
                }
                if let Some(dx) = buf!(*input) {
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gam[ch] * inv_std[ch] / m;
                            for i in 0..inner {
                                let j = (b * c + ch) * inner + i;
                                dx[j] += scale * (m * gd[j] - sum_g[ch] - xh[j] * sum_gx[ch]);
                            }
                        }
                    }
                }
            }
            Op::Upsample2(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*a).len() / (h * w);
                let w2 = 2 * w;
                if let Some(da) = buf!(*a) {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for x in 0..w2 {
                                da[(p * h + y / 2) * w + x / 2] += gd[(p * 2 * h + y) * w2 + x];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = self.value(*a).len() / (h * w);
                let (h2, w2) = (h / 2, w / 2);
                if let Some(da) = buf!(*a) {
                    for p in 0..planes {
                        for y in 0..h2 {
                            for x in 0..w2 {
                                let gv = 0.25 * gd[(p * h2 + y) * w2 + x];
                                let base = (p * h + 2 * y) * w + 2 * x;
                                da[base] += gv;
                                da[base + 1] += gv;
                                da[base + w] += gv;
                                da[base + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, dim, inner) = axis_split(self.shape(*a), *axis);
                if let Some(da) = buf!(*a) {
                    for o in 0..outer {
                        for d in 0..dim {
                            for i in 0..inner {
                                da[(o * dim + d) * inner + i] += gd[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let gv = gd[0];
                elementwise_scalar(buf!(*a), gv);
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let d = self.shape(*p)[*axis];
                    if let Some(dp) = buf!(*p) {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + d) * inner];
                            for (x, v) in dp[o * d * inner..(o + 1) * d * inner].iter_mut().zip(src) {
                                *x += v;
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = axis_split(self.shape(*input), *axis);
                let len = out.shape()[*axis];
                if let Some(da) = buf!(*input) {
                    for o in 0..outer {
                        let dst = &mut da[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        for (x, v) in dst.iter_mut().zip(&gd[o * len * inner..(o + 1) * len * inner]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                if let Some(da) = buf!(*a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, v) in da[i * inner..(i + 1) * inner].iter_mut().zip(&gd[r * inner..(r + 1) * inner]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, idx) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                if let Some(da) = buf!(*a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, v) in da[r * inner..(r + 1) * inner].iter_mut().zip(&gd[i * inner..(i + 1) * inner]) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Reshape(a) => elementwise!(*a, |_k, gv| gv),
            Op::TileSpatial(a) => {
                let s = out.shape();
                let hw = s[2] * s[3];
                if let Some(da) = buf!(*a) {
                    for (k, d) in da.iter_mut().enumerate() {
                        *d += gd[k * hw..(k + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::GridSample { source, boxes, box_var } => {
                let s = self.shape(*source);
                let (c, h, w) = (s[1], s[2], s[3]);
                let (out_h, out_w) = (out.shape()[2], out.shape()[3]);
                if let Some(ds) = buf!(*source) {
                    for (b, bx) in boxes.iter().enumerate() {
                        for y in 0..out_h {
                            let Some(v) = kernels::warp_coord((y as f64 + 0.5) / out_h as f64, bx[1], bx[3], h) else {
                                continue;
                            };
                            let ty = kernels::tap(v, h);
                            for x in 0..out_w {
                                let Some(u) = kernels::warp_coord((x as f64 + 0.5) / out_w as f64, bx[0], bx[2], w)
                                else {
                                    continue;
                                };
                                let tx = kernels::tap(u, w);
                                for ch in 0..c {
                                    let gv = gd[((b * c + ch) * out_h + y) * out_w + x];
                                    let plane = &mut ds[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                                    kernels::bilinear_adjoint(plane, w, ty, tx, gv);
                                }
                            }
                        }
                    }
                }
                if let Some(bv) = box_var {
                    let src = self.value(*source).data();
                    if let Some(db) = buf!(*bv) {
                        grid_sample_box_grad(src, boxes, c, h, w, out_h, out_w, gd, db);
                    }
                }
            }
            Op::CropResize { images, crops } => {
                let s = self.shape(*images);
                let (c, h, w) = (s[1], s[2], s[3]);
                let size = out.shape()[2];
                if let Some(di) = buf!(*images) {
                    for (k, (img, bx)) in crops.iter().enumerate() {
                        for y in 0..size {
                            let ty = crop_tap(y, size, bx[1], bx[3], h);
                            for x in 0..size {
                                let tx = crop_tap(x, size, bx[0], bx[2], w);
                                for ch in 0..c {
                                    let gv = gd[((k * c + ch) * size + y) * size + x];
                                    let plane = &mut di[(img * c + ch) * h * w..(img * c + ch + 1) * h * w];
                                    kernels::bilinear_adjoint(plane, w, ty, tx, gv);
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.shape()[1];
                let m = labels.len() as f64;
                let scale = gd[0] / m;
                let p = probs.data();
                if let Some(dz) = buf!(*logits) {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dz[r * k + j] += scale * (p[r * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn elementwise_scalar(buf: Option<&mut [f64]>, gv: f64) {
    if let Some(d) = buf {
        d.iter_mut().for_each(|x| *x += gv);
    }
}

/// Sampling tap for crop pixel `i` of `size` along one axis of a box
/// `[a, b)` in an image axis of `extent` pixels.
fn crop_tap(i: usize, size: usize, a: f64, b: f64, extent: usize) -> Tap {
    let p = a + (i as f64 + 0.5) / size as f64 * (b - a);
    kernels::tap(p * extent as f64 - 0.5, extent)
}

#[allow(clippy::too_many_arguments)]
fn grid_sample_box_grad(
    src: &[f64],
    boxes: &[BoxCoords],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    gd: &[f64],
    db: &mut [f64],
) {
    for (b, bx) in boxes.iter().enumerate() {
        let (bw, bh) = (bx[2] - bx[0], bx[3] - bx[1]);
        for y in 0..out_h {
            let py = (y as f64 + 0.5) / out_h as f64;
            let Some(v) = kernels::warp_coord(py, bx[1], bx[3], h) else { continue };
            let ty = kernels::tap(v, h);
            for x in 0..out_w {
                let px = (x as f64 + 0.5) / out_w as f64;
                let Some(u) = kernels::warp_coord(px, bx[0], bx[2], w) else { continue };
                let tx = kernels::tap(u, w);
                for ch in 0..c {
                    let gv = gd[((b * c + ch) * out_h + y) * out_w + x];
                    if gv == 0.0 {
                        continue;
                    }
                    let plane = &src[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    let at = |yy: usize, xx: usize| plane[yy * w + xx];
                    if !tx.clamped {
                        let dout_du = (1.0 - ty.frac) * (at(ty.lo, tx.hi) - at(ty.lo, tx.lo))
                            + ty.frac * (at(ty.hi, tx.hi) - at(ty.hi, tx.lo));
                        db[b * 4] += gv * dout_du * w as f64 * (px - bx[2]) / (bw * bw);
                        db[b * 4 + 2] += gv * dout_du * -(w as f64) * (px - bx[0]) / (bw * bw);
                    }
                    if !ty.clamped {
                        let dout_dv = (1.0 - tx.frac) * (at(ty.hi, tx.lo) - at(ty.lo, tx.lo))
                            + tx.frac * (at(ty.hi, tx.hi) - at(ty.lo, tx.hi));
                        db[b * 4 + 1] += gv * dout_dv * h as f64 * (py - bx[3]) / (bh * bh);
                        db[b * 4 + 3] += gv * dout_dv * -(h as f64) * (py - bx[1]) / (bh * bh);
                    }
                }
            }
        }
    }
}

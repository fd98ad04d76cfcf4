use super::{matmul_into, Tensor};
use crate::error::{shape_err, GepError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowSoftmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    L2NormalizeRows(Var),
    LayerNorm(Var, f64),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MaskFill(Var, Vec<f64>),
    MaskedMean(Var, Vec<f64>, f64),
    MaskedAvgPool { x: Var, mask: Vec<f64>, s: usize },
    DiffX(Var),
    DiffY(Var),
    GroupMeanRows(Var, usize),
    Custom(Var, fn(f64) -> f64),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are evaluated eagerly when recorded; [`Graph::backward`] replays the
/// tape in reverse. All reductions sum in ascending index order, so a given
/// graph always produces bitwise identical values and gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: copies the current value as a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    fn row_broadcast(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let c = va.cols();
        if vb.len() != c {
            return shape_err(format!(
                "row broadcast of {:?} over {:?}",
                vb.shape(),
                va.shape()
            ));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, &y) in row.iter_mut().zip(vb.data()) {
                if mul {
                    *x *= y;
                } else {
                    *x += y;
                }
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        let op = if mul { Op::MulRow(a, b) } else { Op::AddRow(a, b) };
        Ok(self.push(value, op, ng))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, false)
    }

    /// Multiplies every row of `a` element-wise by the vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast(a, b, true)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Square root clamped at zero; the gradient is zero for inputs ≤ 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same operand")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s: f64 = v.data().iter().sum();
        let m = s / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a), ng)
    }

    /// Sums over the trailing axis: `R×C → R`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols().max(1);
        let data: Vec<f64> = v.data().chunks(c).map(|r| r.iter().sum()).collect();
        let value = Tensor::vector(data);
        let ng = self.ng(a);
        self.push(value, Op::RowSum(a), ng)
    }

    fn softmax_rows(v: &Tensor, causal: bool) -> Tensor {
        let c = v.cols().max(1);
        let mut out = v.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let live = if causal { (i % c) + 1 } else { c };
            let m = row[..live].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row[..live].iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row[..live].iter_mut() {
                *x /= z;
            }
            for x in row[live..].iter_mut() {
                *x = 0.0;
            }
        }
        Tensor::new(v.shape(), out).expect("shape preserved")
    }

    /// Softmax over the trailing axis.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = Self::softmax_rows(self.value(a), false);
        let ng = self.ng(a);
        self.push(value, Op::RowSoftmax(a), ng)
    }

    /// Softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return shape_err(format!("causal softmax needs a square matrix, got {s:?}"));
        }
        let value = Self::softmax_rows(self.value(a), true);
        let ng = self.ng(a);
        Ok(self.push(value, Op::CausalSoftmax(a), ng))
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols().max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + z.ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = Tensor::new(v.shape(), out).expect("shape preserved");
        let ng = self.ng(a);
        self.push(value, Op::LogSoftmax(a), ng)
    }

    /// Scales each row to unit ℓ2 norm; zero rows map to zero with zero gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols().max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
        let value = Tensor::new(v.shape(), out).expect("shape preserved");
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows(a), ng)
    }

    /// Row-wise standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let v = self.value(a);
        let c = v.cols().max(1);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            let (mu, s) = row_stats(row, eps);
            for x in row.iter_mut() {
                *x = (*x - mu) / s;
            }
        }
        let value = Tensor::new(v.shape(), out).expect("shape preserved");
        let ng = self.ng(a);
        self.push(value, Op::LayerNorm(a, eps), ng)
    }

    /// `out[i] = a[index[i]]`, reshaped to `shape`. Covers every fixed
    /// re-arrangement (patch layouts, flips, selections).
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= v.len()) {
            return shape_err(format!("gather index {bad} outside {} values", v.len()));
        }
        let data = index.iter().map(|&i| v.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Gather(a, index), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(a).len();
        if shape.iter().product::<usize>() != n {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape(a), shape));
        }
        self.gather(a, (0..n).collect(), shape)
    }

    /// Columns `start..start + width` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || start + width > v.cols() {
            return shape_err(format!(
                "column slice {}..{} of {:?}",
                start,
                start + width,
                v.shape()
            ));
        }
        let (r, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&v.data()[i * c + start..i * c + start + width]);
        }
        let value = Tensor::new(&[r, width], data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing");
        };
        let r = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).ndim() != 2 || self.value(p).rows() != r) {
            return shape_err("concat_cols needs 2-D parts with equal row counts");
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(&[r, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    fn check_mask(&self, a: Var, mask: &Tensor) -> Result<()> {
        if mask.len() != self.value(a).len() {
            return shape_err(format!(
                "mask {:?} vs values {:?}",
                mask.shape(),
                self.shape(a)
            ));
        }
        Ok(())
    }

    /// Keeps `a` where `mask` is nonzero and writes `fill` elsewhere; masked-out
    /// entries receive no gradient.
    pub fn mask_fill(&mut self, a: Var, mask: &Tensor, fill: f64) -> Result<Var> {
        self.check_mask(a, mask)?;
        let m: Vec<f64> = mask.data().iter().map(|&x| if x != 0.0 { 1.0 } else { 0.0 }).collect();
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .zip(&m)
            .map(|(&x, &k)| if k != 0.0 { x } else { fill })
            .collect();
        let value = Tensor::new(v.shape(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::MaskFill(a, m), ng))
    }

    /// `Σ m·x / (Σ m + eps)`.
    pub fn masked_mean(&mut self, a: Var, mask: &Tensor, eps: f64) -> Result<Var> {
        self.check_mask(a, mask)?;
        let v = self.value(a);
        let mut num = 0.0;
        let mut den = 0.0;
        for (&x, &m) in v.data().iter().zip(mask.data()) {
            if m != 0.0 {
                num += m * x;
                den += m;
            }
        }
        let value = Tensor::scalar(num / (den + eps));
        let ng = self.ng(a);
        Ok(self.push(value, Op::MaskedMean(a, mask.data().to_vec(), eps), ng))
    }

    /// `s×s` average pooling of an `H×W` grid restricted to pixels with a
    /// nonzero mask. Cells without any valid pixel output `1.0`, a neutral
    /// value for the log that usually follows.
    pub fn masked_avg_pool(&mut self, a: Var, mask: &Tensor, s: usize) -> Result<Var> {
        self.check_mask(a, mask)?;
        let v = self.value(a);
        if v.ndim() != 2 || s == 0 || !v.shape()[0].is_multiple_of(s) || !v.shape()[1].is_multiple_of(s) {
            return shape_err(format!("pool factor {s} does not tile {:?}", v.shape()));
        }
        let (h, w) = (v.shape()[0], v.shape()[1]);
        let (oh, ow) = (h / s, w / s);
        let mut out = vec![0.0; oh * ow];
        for (o, cell) in out.iter_mut().enumerate() {
            let (ci, cj) = (o / ow, o % ow);
            let mut num = 0.0;
            let mut cnt = 0.0;
            for di in 0..s {
                for dj in 0..s {
                    let p = (ci * s + di) * w + cj * s + dj;
                    if mask.data()[p] != 0.0 {
                        num += v.data()[p];
                        cnt += 1.0;
                    }
                }
            }
            *cell = if cnt > 0.0 { num / cnt } else { 1.0 };
        }
        let value = Tensor::new(&[oh, ow], out)?;
        let ng = self.ng(a);
        let m = mask.data().iter().map(|&x| if x != 0.0 { 1.0 } else { 0.0 }).collect();
        Ok(self.push(value, Op::MaskedAvgPool { x: a, mask: m, s }, ng))
    }

    /// Forward difference along columns: `H×W → H×(W−1)`.
    pub fn diff_x(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || v.shape()[1] == 0 {
            return shape_err(format!("diff_x of {:?}", v.shape()));
        }
        let (h, w) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(h * (w - 1));
        for i in 0..h {
            for j in 0..w - 1 {
                out.push(v.data()[i * w + j + 1] - v.data()[i * w + j]);
            }
        }
        let value = Tensor::new(&[h, w - 1], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::DiffX(a), ng))
    }

    /// Forward difference along rows: `H×W → (H−1)×W`.
    pub fn diff_y(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || v.shape()[0] == 0 {
            return shape_err(format!("diff_y of {:?}", v.shape()));
        }
        let (h, w) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity((h - 1) * w);
        for i in 0..h - 1 {
            for j in 0..w {
                out.push(v.data()[(i + 1) * w + j] - v.data()[i * w + j]);
            }
        }
        let value = Tensor::new(&[h - 1, w], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::DiffY(a), ng))
    }

    /// Means of consecutive groups of `group` rows: `R×C → (R/group)×C`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || group == 0 || !v.rows().is_multiple_of(group) {
            return shape_err(format!("group of {group} rows does not tile {:?}", v.shape()));
        }
        let c = v.cols();
        let g = v.rows() / group;
        let mut out = vec![0.0; g * c];
        for r in 0..v.rows() {
            let dst = &mut out[(r / group) * c..(r / group + 1) * c];
            for (o, &x) in dst.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for x in out.iter_mut() {
            *x /= group as f64;
        }
        let value = Tensor::new(&[g, c], out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::GroupMeanRows(a, group), ng))
    }

    /// Registers an element-wise primitive from its value and derivative.
    pub fn map_custom(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(a, f, Op::Custom(a, df))
    }

    /// Row-wise cosine similarity of two `N×D` matrices, composed from
    /// normalize, multiply and row-sum.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let na = self.l2_normalize_rows(a);
        let nb = self.l2_normalize_rows(b);
        let p = self.mul(na, nb)?;
        Ok(self.row_sum(p))
    }

    /// Reverse pass from a scalar node. Returns one gradient per node; nodes
    /// that do not depend on any input get `None`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(GepError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.acc(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.acc(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / vb[k];
                    }
                });
                self.acc(grads, *b, |s| {
                    for k in 0..s.len() {
                        s[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g));
            }
            Op::AddScalar(a) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::MatMul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.acc(grads, *a, |s| {
                    let bt = tb.transpose().expect("2-D");
                    matmul_into(g, bt.data(), s, m, n, k);
                });
                self.acc(grads, *b, |s| {
                    let at = ta.transpose().expect("2-D");
                    matmul_into(at.data(), g, s, k, m, n);
                });
            }
            Op::Transpose(a) => {
                let sh = node.value.shape();
                let (r, c) = (sh[0], sh[1]);
                self.acc(grads, *a, |s| {
                    for p in 0..r {
                        for q in 0..c {
                            s[q * r + p] += g[p * c + q];
                        }
                    }
                });
            }
            Op::AddRow(a, b) => {
                let c = node.value.cols().max(1);
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.acc(grads, *b, |s| {
                    for row in g.chunks(c) {
                        for (s, g) in s.iter_mut().zip(row) {
                            *s += g;
                        }
                    }
                });
            }
            Op::MulRow(a, b) => {
                let c = node.value.cols().max(1);
                let (va, vb) = (val(*a), val(*b));
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * vb[k % c];
                    }
                });
                self.acc(grads, *b, |s| {
                    for k in 0..g.len() {
                        s[k % c] += g[k] * va[k];
                    }
                });
            }
            Op::Exp(a) => self.acc(grads, *a, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * y[k];
                }
            }),
            Op::Log(a) => {
                let va = val(*a);
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] / va[k];
                    }
                })
            }
            Op::Sqrt(a) => self.acc(grads, *a, |s| {
                for k in 0..s.len() {
                    if y[k] > 0.0 {
                        s[k] += g[k] * 0.5 / y[k];
                    }
                }
            }),
            Op::Abs(a) => {
                let va = val(*a);
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        let sign = if va[k] > 0.0 {
                            1.0
                        } else if va[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[k] += g[k] * sign;
                    }
                })
            }
            Op::Tanh(a) => self.acc(grads, *a, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Op::Sigmoid(a) => self.acc(grads, *a, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Op::Gelu(a) => {
                let va = val(*a);
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * gelu_grad(va[k]);
                    }
                })
            }
            Op::Custom(a, df) => {
                let va = val(*a);
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k] * df(va[k]);
                    }
                })
            }
            Op::Sum(a) => self.acc(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.acc(grads, *a, |s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::RowSum(a) => {
                let c = self.nodes[a.0].value.cols().max(1);
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        s[k] += g[k / c];
                    }
                })
            }
            Op::RowSoftmax(a) | Op::CausalSoftmax(a) => {
                let c = node.value.cols().max(1);
                self.acc(grads, *a, |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for k in 0..c {
                            srow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = node.value.cols().max(1);
                self.acc(grads, *a, |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for k in 0..c {
                            srow[k] += grow[k] - yrow[k].exp() * gs;
                        }
                    }
                })
            }
            Op::L2NormalizeRows(a) => {
                let c = node.value.cols().max(1);
                let va = val(*a);
                self.acc(grads, *a, |s| {
                    for (r, (srow, yrow)) in s.chunks_mut(c).zip(y.chunks(c)).enumerate() {
                        let xrow = &va[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let n = xrow.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if n == 0.0 {
                            continue;
                        }
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for k in 0..c {
                            srow[k] += (grow[k] - yrow[k] * dot) / n;
                        }
                    }
                })
            }
            Op::LayerNorm(a, eps) => {
                let c = node.value.cols().max(1);
                let va = val(*a);
                self.acc(grads, *a, |s| {
                    for (r, srow) in s.chunks_mut(c).enumerate() {
                        let (_, sd) = row_stats(&va[r * c..(r + 1) * c], *eps);
                        let yrow = &y[r * c..(r + 1) * c];
                        let grow = &g[r * c..(r + 1) * c];
                        let gm = grow.iter().sum::<f64>() / c as f64;
                        let gy = yrow.iter().zip(grow).map(|(y, g)| y * g).sum::<f64>() / c as f64;
                        for k in 0..c {
                            srow[k] += (grow[k] - gm - yrow[k] * gy) / sd;
                        }
                    }
                })
            }
            Op::Gather(a, index) => self.acc(grads, *a, |s| {
                for (k, &src) in index.iter().enumerate() {
                    s[src] += g[k];
                }
            }),
            Op::SliceCols(a, start) => {
                let src_c = self.nodes[a.0].value.cols();
                let w = node.value.cols();
                self.acc(grads, *a, |s| {
                    for (r, grow) in g.chunks(w.max(1)).enumerate() {
                        for (j, gv) in grow.iter().enumerate() {
                            s[r * src_c + start + j] += gv;
                        }
                    }
                })
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    self.acc(grads, p, |s| {
                        for (r, srow) in s.chunks_mut(w.max(1)).enumerate() {
                            for j in 0..w {
                                srow[j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MaskFill(a, m) => self.acc(grads, *a, |s| {
                for k in 0..s.len() {
                    s[k] += g[k] * m[k];
                }
            }),
            Op::MaskedMean(a, m, eps) => {
                let den: f64 = m.iter().filter(|&&x| x != 0.0).sum::<f64>() + eps;
                self.acc(grads, *a, |s| {
                    for k in 0..s.len() {
                        if m[k] != 0.0 {
                            s[k] += g[0] * m[k] / den;
                        }
                    }
                })
            }
            Op::MaskedAvgPool { x, mask, s: f } => {
                let w = self.nodes[x.0].value.shape()[1];
                let ow = node.value.shape()[1];
                self.acc(grads, *x, |s| {
                    for (o, go) in g.iter().enumerate() {
                        let (ci, cj) = (o / ow, o % ow);
                        let mut cells = Vec::with_capacity(f * f);
                        for di in 0..*f {
                            for dj in 0..*f {
                                let p = (ci * f + di) * w + cj * f + dj;
                                if mask[p] != 0.0 {
                                    cells.push(p);
                                }
                            }
                        }
                        let n = cells.len() as f64;
                        for p in cells {
                            s[p] += go / n;
                        }
                    }
                })
            }
            Op::DiffX(a) => {
                let w = self.nodes[a.0].value.shape()[1];
                self.acc(grads, *a, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        let (i, j) = (k / (w - 1), k % (w - 1));
                        s[i * w + j + 1] += gv;
                        s[i * w + j] -= gv;
                    }
                })
            }
            Op::DiffY(a) => {
                let w = self.nodes[a.0].value.shape()[1];
                self.acc(grads, *a, |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k + w] += gv;
                        s[k] -= gv;
                    }
                })
            }
            Op::GroupMeanRows(a, group) => {
                let c = node.value.cols().max(1);
                self.acc(grads, *a, |s| {
                    for (k, sv) in s.iter_mut().enumerate() {
                        let (r, j) = (k / c, k % c);
                        *sv += g[(r / group) * c + j] / *group as f64;
                    }
                })
            }
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, (var + eps).sqrt())
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v` shaped like its value; zeros if `v` did not
    /// influence the output.
    pub fn get(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v);
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value"),
            None => Tensor::zeros(shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        assert_eq!(g.value(s).item(), Some(14.0));
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(GepError::Contract(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, -2.0]));
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        // d(x * sg(x))/dx = sg(x)
        assert_eq!(grads.get(&g, x).data(), &[1.0, -2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 3], vec![1.0, -3.0, 0.5, 100.0, 99.0, -50.0]).unwrap());
        let y = g.row_softmax(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[3, 3], vec![0.0; 9]).unwrap());
        let y = g.causal_softmax(x).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]
        );
    }

    #[test]
    fn zero_row_normalizes_to_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap());
        let y = g.l2_normalize_rows(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(&grads.get(&g, x).data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn masked_pool_skips_invalid_pixels() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 2], vec![1.0, 3.0, 100.0, 5.0]).unwrap());
        let m = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let p = g.masked_avg_pool(x, &m, 2).unwrap();
        assert_eq!(g.value(p).data(), &[3.0]);
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(&g, x).data()[2], 0.0);
    }
}

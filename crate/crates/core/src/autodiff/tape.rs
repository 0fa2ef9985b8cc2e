use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, gemm, ConvGeom, Mat};
use super::tensor::{numel, Parameter, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Epsilon added to the variance in layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are invalidated when the tape is cleared; using a stale handle is
/// a contract error rather than silently reading another node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    generation: u64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param { slot: usize },
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeom, cols: Vec<f64> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Relu { a: usize },
    Gelu { a: usize },
    Log { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    MeanAxis { a: usize, outer: usize, len: usize, inner: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    Softmax { a: usize },
    CrossEntropy { probs: usize, labels: Vec<usize>, weights: Vec<f64>, denom: f64 },
    AbsMeanDiff { a: usize, b: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    AvgPool2 { a: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Which parameter groups register as differentiable leaves.
#[derive(Clone, Debug, Default)]
enum Trainable {
    #[default]
    All,
    Groups(Vec<String>),
}

/// Records a forward computation so that [`Tape::backward`] can propagate
/// adjoints back to the parameters that were registered on it.
///
/// A tape is meant to live for one forward/backward pass. `backward` clears
/// it, which also invalidates every [`Var`] handed out so far.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_names: Vec<String>,
    trainable: Trainable,
    generation: u64,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_names: Vec::new(),
            trainable: Trainable::All,
            generation: fresh_generation(),
            kink_margin: f64::INFINITY,
        }
    }

    /// A tape on which only parameters of the listed groups (`e1`, `f2`, ...)
    /// are differentiable. Everything else is recorded as a constant.
    pub fn with_groups<S: AsRef<str>>(groups: &[S]) -> Self {
        let mut tape = Tape::new();
        tape.trainable = Trainable::Groups(groups.iter().map(|g| g.as_ref().to_string()).collect());
        tape
    }

    /// A tape with no differentiable parameters, for inference.
    pub fn inference() -> Self {
        Tape::with_groups::<&str>(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node and invalidate outstanding handles.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_names.clear();
        self.generation = fresh_generation();
        self.kink_margin = f64::INFINITY;
    }

    /// Smallest `|x|` fed to [`Tape::relu`] since the tape was created or
    /// cleared. Finite differences are only meaningful when a perturbation
    /// cannot carry a ReLU input across zero.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(Error::Contract("variable is not on the active tape".into()));
        }
        Ok(v.id)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.index(v)?;
        Ok(&self.nodes[i])
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.node(v)?.needs_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { id: self.nodes.len() - 1, generation: self.generation }
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Register a parameter. It is a differentiable leaf iff its group is
    /// trainable on this tape.
    pub fn param(&mut self, p: &Parameter) -> Var {
        let trainable = match &self.trainable {
            Trainable::All => true,
            Trainable::Groups(groups) => groups.iter().any(|g| g == p.group()),
        };
        if !trainable {
            return self.constant(p.value.clone());
        }
        let slot = self.param_names.len();
        self.param_names.push(p.name().to_string());
        self.push(p.value.clone(), Op::Param { slot }, true)
    }

    /// Same values, no linkage: nothing downstream flows back into `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.constant(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Mat::new(self.nodes[ia].value.data(), m, k),
            Mat::new(self.nodes[ib].value.data(), k, n),
            0.0,
            &mut out,
        );
        let ng = self.any_grad(&[ia, ib]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a: ia, b: ib }, ng))
    }

    /// Batched product over a shared leading axis: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]^T` when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Dimension(format!("bmm of {sa:?} and {sb:?} (trans_b={trans_b})")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for t in 0..batch {
            let am = Mat::new(&da[t * m * k..(t + 1) * m * k], m, k);
            let bslice = &db[t * k * n..(t + 1) * k * n];
            let bm = if trans_b { Mat::transposed(bslice, n, k) } else { Mat::new(bslice, k, n) };
            gemm(am, bm, 0.0, &mut out[t * m * n..(t + 1) * m * n]);
        }
        let ng = self.any_grad(&[ia, ib]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::BatchMatMul { a: ia, b: ib, trans_b },
            ng,
        ))
    }

    /// Cross-correlation of `x: [n,c,h,w]` with `kernel: [o,c,kh,kw]`, zero
    /// padding `pad` on every side, optional per-channel `bias: [o]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.index(x)?, self.index(kernel)?);
        let ibias = bias.map(|b| self.index(b)).transpose()?;
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::Dimension(format!("conv2d input {sx:?} with kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if let Some(ib) = ibias {
            if self.nodes[ib].value.shape() != [o] {
                return Err(Error::Dimension(format!(
                    "conv2d bias {:?} for {o} output channels",
                    self.nodes[ib].value.shape()
                )));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, c, h, w, o, kh, kw, stride, pad, ho, wo };
        let (rows, l) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; n * rows * l];
        let mut out = vec![0.0; n * o * l];
        {
            let xd = self.nodes[ix].value.data();
            let wd = self.nodes[iw].value.data();
            for s in 0..n {
                let col = &mut cols[s * rows * l..(s + 1) * rows * l];
                kernels::im2col(&geom, &xd[s * c * h * w..(s + 1) * c * h * w], col);
                gemm(Mat::new(wd, o, rows), Mat::new(col, rows, l), 0.0, &mut out[s * o * l..(s + 1) * o * l]);
            }
            if let Some(ib) = ibias {
                let bd = self.nodes[ib].value.data();
                for s in 0..n {
                    for (ch, &bv) in bd.iter().enumerate() {
                        out[(s * o + ch) * l..(s * o + ch + 1) * l].iter_mut().for_each(|v| *v += bv);
                    }
                }
            }
        }
        let mut ids = vec![ix, iw];
        ids.extend(ibias);
        let ng = self.any_grad(&ids);
        if !ng {
            cols = Vec::new();
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, o, ho, wo], out),
            Op::Conv2d { x: ix, w: iw, bias: ibias, geom, cols },
            ng,
        ))
    }

    fn broadcast_check(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.broadcast_check(ia, ib, what)?;
        let va = &self.nodes[ia].value;
        let vb = self.nodes[ib].value.data();
        let mut data = Vec::with_capacity(va.len());
        for chunk in va.data().chunks(vb.len()) {
            data.extend(chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        }
        Ok((ia, ib, Tensor::from_parts(va.shape().to_vec(), data)))
    }

    /// `a + b`, where `b` may omit leading axes of `a` and is then repeated.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.any_grad(&[ia, ib]);
        Ok(self.push(t, Op::Add { a: ia, b: ib }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.any_grad(&[ia, ib]);
        Ok(self.push(t, Op::Sub { a: ia, b: ib }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.any_grad(&[ia, ib]);
        Ok(self.push(t, Op::Mul { a: ia, b: ib }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect());
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(t, Op::Scale { a: ia, factor }, ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(usize, Tensor)> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        Ok((ia, Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (ia, t) = self.unary(a, |x| x.max(0.0))?;
        let margin = self.nodes[ia].value.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.kink_margin = self.kink_margin.min(margin);
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(t, Op::Relu { a: ia }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (ia, t) = self.unary(a, kernels::gelu)?;
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(t, Op::Gelu { a: ia }, ng))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Numeric(format!("log of non-positive value {bad}")));
        }
        let (ia, t) = self.unary(a, f64::ln)?;
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(t, Op::Log { a: ia }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ia }, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let v = self.nodes[ia].value.data();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(Tensor::scalar(s), Op::Mean { a: ia }, ng))
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let shape = self.nodes[ia].value.shape();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("mean over axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let src = self.nodes[ia].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..len {
                let row = &src[(o * len + j) * inner..][..inner];
                dst.iter_mut().zip(row).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= len as f64);
        }
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MeanAxis { a: ia, outer, len, inner }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        if numel(shape) != v.len() {
            return Err(Error::Dimension(format!("reshape {:?} into {shape:?}", v.shape())));
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(t, Op::Reshape { a: ia }, ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..v.shape().len()).collect::<Vec<_>>() {
            return Err(Error::Dimension(format!("permutation {axes:?} of {:?}", v.shape())));
        }
        let (shape, data) = kernels::permute(v.data(), v.shape(), axes);
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute { a: ia, axes: axes.to_vec() }, ng))
    }

    /// Softmax over the trailing axis, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        if v.shape().is_empty() {
            return Err(Error::Dimension("softmax of a scalar".into()));
        }
        if !v.all_finite() {
            return Err(Error::Numeric("softmax of non-finite logits".into()));
        }
        let k = *v.shape().last().unwrap();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(t, Op::Softmax { a: ia }, ng))
    }

    /// Mean over rows of `-ln max(p[row, label], floor)` for `probs: [n,K]`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len();
        self.weighted_cross_entropy(probs, labels, &vec![1.0; n], n as f64)
    }

    /// `sum_i weights[i] * -ln max(p[i, labels[i]], floor) / denom`.
    pub fn weighted_cross_entropy(&mut self, probs: Var, labels: &[usize], weights: &[f64], denom: f64) -> Result<Var> {
        let ip = self.index(probs)?;
        let v = &self.nodes[ip].value;
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || weights.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "cross entropy of {s:?} with {} labels and {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if !(denom > 0.0) {
            return Err(Error::Contract(format!("cross entropy normalizer {denom} must be positive")));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} outside [0, {k})")));
        }
        let total: f64 = labels
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&l, &w))| if w == 0.0 { 0.0 } else { -w * v.data()[i * k + l].max(PROB_FLOOR).ln() })
            .sum();
        let ng = self.nodes[ip].needs_grad;
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::CrossEntropy { probs: ip, labels: labels.to_vec(), weights: weights.to_vec(), denom },
            ng,
        ))
    }

    /// Mean over rows of `(1/K) * sum_k |a_k - b_k|`, `K` the trailing extent.
    pub fn abs_mean_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!("abs_mean_diff of {:?} and {:?}", va.shape(), vb.shape())));
        }
        let total: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let value = total / va.len() as f64;
        let ng = self.any_grad(&[ia, ib]);
        Ok(self.push(Tensor::scalar(value), Op::AbsMeanDiff { a: ia, b: ib }, ng))
    }

    /// Normalize the trailing axis, then apply learned `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.index(x)?, self.index(gamma)?, self.index(beta)?);
        let v = &self.nodes[ix].value;
        let d = *v.shape().last().ok_or_else(|| Error::Dimension("layernorm of a scalar".into()))?;
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        if g.len() != d || b.len() != d || self.nodes[ig].value.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "layernorm over {d} features with scale {:?} and shift {:?}",
                self.nodes[ig].value.shape(),
                self.nodes[ib].value.shape()
            )));
        }
        let rows = v.len() / d;
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let src = &v.data()[r * d..(r + 1) * d];
            let mu = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYERNORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (src[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.any_grad(&[ix, ig, ib]);
        Ok(self.push(t, Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, rstd }, ng))
    }

    /// 2x2 average pooling with stride 2 over `[n,c,h,w]`; odd trailing rows
    /// and columns are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let v = &self.nodes[ia].value;
        let s = v.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dimension(format!("2x2 average pool of {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = v.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let p = &src[plane * h * w..];
            for y in 0..ho {
                for x in 0..wo {
                    let i = 2 * y * w + 2 * x;
                    out[(plane * ho + y) * wo + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
                }
            }
        }
        let ng = self.nodes[ia].needs_grad;
        Ok(self.push(Tensor::from_parts(vec![n, c, ho, wo], out), Op::AvgPool2 { a: ia }, ng))
    }

    /// Propagate `d loss` back through the tape and accumulate into the
    /// gradients of `params`. Parameters absent from `params`, or frozen on
    /// this tape, receive nothing. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, params: &mut [&mut Parameter]) -> Result<()> {
        let root = self.index(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let grads = self.gradients(root);
        let by_name: HashMap<String, usize> =
            params.iter().enumerate().map(|(i, p)| (p.name().to_string(), i)).collect();
        for (slot, g) in grads {
            if let Some(&i) = by_name.get(self.param_names[slot].as_str()) {
                params[i].grad.data_mut().iter_mut().zip(&g).for_each(|(d, s)| *d += s);
            }
        }
        self.clear();
        Ok(())
    }

    fn gradients(&self, root: usize) -> Vec<(usize, Vec<f64>)> {
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root] = Some(vec![1.0]);
        let mut out = Vec::new();
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop(i, g, &mut adj, &mut out);
        }
        out
    }

    fn backprop(&self, i: usize, g: Vec<f64>, adj: &mut [Option<Vec<f64>>], params: &mut Vec<(usize, Vec<f64>)>) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].needs_grad;
        let mut send = |j: usize, grad: Vec<f64>| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut adj[j] {
                Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param { slot } => params.push((*slot, g)),
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(Mat::new(&g, m, n), Mat::transposed(val(*b).data(), k, n), 0.0, &mut ga);
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(Mat::transposed(val(*a).data(), m, k), Mat::new(&g, m, n), 0.0, &mut gb);
                    send(*b, gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = val(*a).shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let mut ga = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gt = Mat::new(&g[t * m * n..(t + 1) * m * n], m, n);
                        let bs = &db[t * k * n..(t + 1) * k * n];
                        // dA = G B^T, with B stored [k,n] or [n,k]
                        let bt = if *trans_b { Mat::new(bs, n, k) } else { Mat::transposed(bs, k, n) };
                        gemm(gt, bt, 0.0, &mut ga[t * m * k..(t + 1) * m * k]);
                    }
                    send(*a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gs = &g[t * m * n..(t + 1) * m * n];
                        let as_ = &da[t * m * k..(t + 1) * m * k];
                        let dst = &mut gb[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // B is [n,k]: dB = G^T A
                            gemm(Mat::transposed(gs, m, n), Mat::new(as_, m, k), 0.0, dst);
                        } else {
                            gemm(Mat::transposed(as_, m, k), Mat::new(gs, m, n), 0.0, dst);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Conv2d { x, w, bias, geom, cols } => {
                let gm = *geom;
                let (rows, l) = (gm.col_rows(), gm.col_cols());
                let wd = val(*w).data();
                if wants(*w) {
                    let mut gw = vec![0.0; gm.o * rows];
                    for s in 0..gm.n {
                        let gs = Mat::new(&g[s * gm.o * l..(s + 1) * gm.o * l], gm.o, l);
                        let cs = Mat::transposed(&cols[s * rows * l..(s + 1) * rows * l], rows, l);
                        gemm(gs, cs, 1.0, &mut gw);
                    }
                    send(*w, gw);
                }
                if let Some(b) = bias {
                    if wants(*b) {
                        let mut gb = vec![0.0; gm.o];
                        for s in 0..gm.n {
                            for (ch, acc) in gb.iter_mut().enumerate() {
                                *acc += g[(s * gm.o + ch) * l..(s * gm.o + ch + 1) * l].iter().sum::<f64>();
                            }
                        }
                        send(*b, gb);
                    }
                }
                if wants(*x) {
                    let img = gm.c * gm.h * gm.w;
                    let mut gx = vec![0.0; gm.n * img];
                    let mut gcol = vec![0.0; rows * l];
                    for s in 0..gm.n {
                        let gs = Mat::new(&g[s * gm.o * l..(s + 1) * gm.o * l], gm.o, l);
                        gemm(Mat::transposed(wd, gm.o, rows), gs, 0.0, &mut gcol);
                        kernels::col2im(&gm, &gcol, &mut gx[s * img..(s + 1) * img]);
                    }
                    send(*x, gx);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(*b) {
                    let nb = val(*b).len();
                    let mut gb = vec![0.0; nb];
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += sign * s);
                    }
                    send(*b, gb);
                }
                send(*a, g);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let nb = vb.len();
                if wants(*b) {
                    let mut gb = vec![0.0; nb];
                    for (gc, ac) in g.chunks(nb).zip(va.chunks(nb)) {
                        for ((d, &gi), &ai) in gb.iter_mut().zip(gc).zip(ac) {
                            *d += gi * ai;
                        }
                    }
                    send(*b, gb);
                }
                if wants(*a) {
                    let mut ga = Vec::with_capacity(g.len());
                    for gc in g.chunks(nb) {
                        ga.extend(gc.iter().zip(vb).map(|(&gi, &bi)| gi * bi));
                    }
                    send(*a, ga);
                }
            }
            Op::Scale { a, factor } => send(*a, g.iter().map(|x| x * factor).collect()),
            Op::Relu { a } => {
                let ga = g.iter().zip(val(*a).data()).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect();
                send(*a, ga);
            }
            Op::Gelu { a } => {
                let ga = g.iter().zip(val(*a).data()).map(|(&gi, &x)| gi * kernels::gelu_grad(x)).collect();
                send(*a, ga);
            }
            Op::Log { a } => {
                let ga = g.iter().zip(val(*a).data()).map(|(&gi, &x)| gi / x).collect();
                send(*a, ga);
            }
            Op::Sum { a } => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean { a } => {
                let n = val(*a).len();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let mut ga = vec![0.0; outer * len * inner];
                let scale = 1.0 / *len as f64;
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for j in 0..*len {
                        let dst = &mut ga[(o * len + j) * inner..][..*inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * scale);
                    }
                }
                send(*a, ga);
            }
            Op::Reshape { a } => send(*a, g),
            Op::Permute { a, axes } => {
                let (_, ga) = kernels::permute(&g, node.value.shape(), &kernels::inverse_axes(axes));
                send(*a, ga);
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), dr) in g.chunks(k).zip(y.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, ga);
            }
            Op::CrossEntropy { probs, labels, weights, denom } => {
                let p = val(*probs);
                let k = p.shape()[1];
                let mut gp = vec![0.0; p.len()];
                for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
                    let pv = p.data()[i * k + l];
                    if w != 0.0 && pv > PROB_FLOOR {
                        gp[i * k + l] = -g[0] * w / (denom * pv);
                    }
                }
                send(*probs, gp);
            }
            Op::AbsMeanDiff { a, b } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let scale = g[0] / va.len() as f64 * super::fault::abs_diff_sign();
                let ga: Vec<f64> = va
                    .iter()
                    .zip(vb)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if wants(*b) {
                    send(*b, ga.iter().map(|v| -v).collect());
                }
                send(*a, ga);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = val(*gamma).data();
                let d = gv.len();
                if wants(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        gg.iter_mut().zip(gr.iter().zip(xr)).for_each(|(acc, (a, b))| *acc += a * b);
                    }
                    send(*gamma, gg);
                }
                if wants(*beta) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(acc, a)| *acc += a);
                    }
                    send(*beta, gb);
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((gr, xr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            mean_g += gh;
                            mean_gx += gh * xr[j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] * gv[j] - mean_g - xr[j] * mean_gx);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::AvgPool2 { a } => {
                let s = val(*a).shape();
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let mut ga = vec![0.0; val(*a).len()];
                for plane in 0..s[0] * s[1] {
                    for y in 0..ho {
                        for x in 0..wo {
                            let v = 0.25 * g[(plane * ho + y) * wo + x];
                            let i = plane * h * w + 2 * y * w + 2 * x;
                            ga[i] += v;
                            ga[i + 1] += v;
                            ga[i + w] += v;
                            ga[i + w + 1] += v;
                        }
                    }
                }
                send(*a, ga);
            }
        }
    }
}

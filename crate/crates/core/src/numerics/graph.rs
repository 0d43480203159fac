//! Reverse-mode autodiff over a linear tape of tensor ops.
//!
//! A [`Graph`] is built fresh for each forward pass. Leaves are either
//! parameters (gradient tracked) or constants. [`Graph::backward`] walks the
//! tape in reverse and returns one gradient tensor per tracked node.

use super::kernels::{self, ConvGeom, LayerNormCache};
use super::scalar::{c, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Opaque(&'static str),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Gelu(Var),
    Square(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        cache: LayerNormCache<T>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        a: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        src: Var,
        rows: Vec<usize>,
    },
    BroadcastRows(Var),
    Row {
        a: Var,
        row: usize,
    },
    Sum(Var),
    Mean(Var),
    CosineDistance {
        a: Var,
        b: Var,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Opaque(name) => name,
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Gelu(_) => "gelu",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(_) => "softmax",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Row { .. } => "row",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CosineDistance { .. } => "cosine_distance",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Names of the differentiable ops, as matched by [`BackwardMutation::op`].
pub const OP_NAMES: &[&str] = &[
    "conv2d",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "add_row",
    "gelu",
    "square",
    "abs",
    "layer_norm",
    "softmax",
    "transpose",
    "reshape",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "gather_rows",
    "scatter_rows",
    "broadcast_rows",
    "row",
    "sum",
    "mean",
    "cosine_distance",
    "soft_cross_entropy",
];

/// Multiplies the gradient emitted by every op of one kind. Only used to
/// check that the gradient verifier notices a wrong backward formula.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardMutation {
    pub op: &'static str,
    pub factor: f64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mutation: Option<BackwardMutation>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node; `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            what,
            format!("shape {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn rows_cols<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    t.expect_rank(2, what)?;
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mutation: None,
        }
    }

    pub fn with_mutation(mutation: BackwardMutation) -> Self {
        Self {
            nodes: Vec::new(),
            mutation: Some(mutation),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into an untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Elementwise map with no known derivative. Backward fails with
    /// [`Error::UnsupportedOp`] if a gradient has to pass through it.
    pub fn opaque(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.is_tracked(a);
        self.push(value, Op::Opaque(name), tracked)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        x.expect_rank(3, "conv2d input")?;
        k.expect_rank(4, "conv2d kernel")?;
        b.expect_rank(1, "conv2d bias")?;
        let (xs, ks) = (x.shape(), k.shape());
        if ks[1] != xs[0] {
            return Err(Error::dim(
                "channels",
                format!(
                    "kernel expects {} input channels, input has {}",
                    ks[1], xs[0]
                ),
            ));
        }
        if b.shape()[0] != ks[0] {
            return Err(Error::dim(
                "bias",
                format!(
                    "bias has {} entries for {} output channels",
                    b.shape()[0],
                    ks[0]
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("stride", "stride must be positive"));
        }
        if xs[1] + 2 * padding < ks[2] {
            return Err(Error::dim(
                "height",
                format!("padded height {} < kernel {}", xs[1] + 2 * padding, ks[2]),
            ));
        }
        if xs[2] + 2 * padding < ks[3] {
            return Err(Error::dim(
                "width",
                format!("padded width {} < kernel {}", xs[2] + 2 * padding, ks[3]),
            ));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
        };
        let out = kernels::conv2d_forward(x.data(), k.data(), b.data(), &geom);
        let value = Tensor::new(vec![geom.c_out, geom.out_h(), geom.out_w()], out)?;
        let tracked = self.tracked_any(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(self.value(a), "matmul lhs")?;
        let (k2, n) = rows_cols(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(
                "inner",
                format!("matmul inner dims {k} vs {k2}"),
            ));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, tracked))
    }

    /// `x[L,in] @ w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, din) = rows_cols(self.value(x), "linear input")?;
        let (win, dout) = rows_cols(self.value(w), "linear weight")?;
        if din != win {
            return Err(Error::dim(
                "features",
                format!("linear expects {win} input features, got {din}"),
            ));
        }
        self.value(b).expect_rank(1, "linear bias")?;
        if self.value(b).shape()[0] != dout {
            return Err(Error::dim(
                "bias",
                format!(
                    "bias has {} entries for {dout} outputs",
                    self.value(b).shape()[0]
                ),
            ));
        }
        let mut out = kernels::matmul(self.value(x).data(), self.value(w).data(), l, din, dout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let tracked = self.tracked_any(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![l, dout], out)?,
            Op::Linear { x, w, b },
            tracked,
        ))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let tracked = self.is_tracked(a);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    /// Adds a `[D]` vector to every row of `a[L,D]`.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.value(a), "add_row input")?;
        if self.value(v).shape() != [d] {
            return Err(Error::dim(
                "features",
                format!("row vector {:?} vs width {d}", self.value(v).shape()),
            ));
        }
        let vec = self.value(v).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(d) {
            for (o, &x) in row.iter_mut().zip(&vec) {
                *o = *o + x;
            }
        }
        let tracked = self.tracked_any(&[a, v]);
        Ok(self.push(value, Op::AddRow(a, v), tracked))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(kernels::gelu);
        let tracked = self.is_tracked(a);
        self.push(value, Op::Gelu(a), tracked)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let tracked = self.is_tracked(a);
        self.push(value, Op::Square(a), tracked)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let tracked = self.is_tracked(a);
        self.push(value, Op::Abs(a), tracked)
    }

    /// Normalizes over the last axis. `gamma`/`beta` of `None` mean identity affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::dim(
                "features",
                format!("layer norm needs at least 2 features, got {d}"),
            ));
        }
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            if let Some(p) = p {
                if self.value(p).shape() != [d] {
                    return Err(Error::dim(
                        name,
                        format!("{name} {:?} vs width {d}", self.value(p).shape()),
                    ));
                }
            }
        }
        let (out, cache) = kernels::layer_norm_forward(
            xv.data(),
            gamma.map(|g| self.value(g).data()),
            beta.map(|b| self.value(b).data()),
            d,
            c(eps),
        );
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let mut deps = vec![x];
        deps.extend(gamma);
        deps.extend(beta);
        let tracked = self.tracked_any(&deps);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            tracked,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.value(a), "softmax")?;
        let mut value = self.value(a).clone();
        let src = self.value(a).data();
        for (orow, irow) in value.data_mut().chunks_mut(n).zip(src.chunks(n)) {
            kernels::softmax_row(irow, orow);
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(value, Op::SoftmaxRows(a), tracked))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, cc) = rows_cols(self.value(a), "transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, cc);
        let tracked = self.is_tracked(a);
        Ok(self.push(Tensor::new(vec![cc, r], data)?, Op::Transpose(a), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, cc) = rows_cols(self.value(a), "slice_cols")?;
        if start + len > cc || len == 0 {
            return Err(Error::dim(
                "columns",
                format!("slice {start}..{} of {cc} columns", start + len),
            ));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for row in src.chunks(cc) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(
            Tensor::new(vec![r, len], data)?,
            Op::SliceCols { a, start },
            tracked,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("columns", "concat of zero tensors"))?;
        let (r, _) = rows_cols(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = rows_cols(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(Error::dim("rows", format!("{pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(
            Tensor::new(vec![r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            tracked,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("rows", "concat of zero tensors"))?;
        let (_, cc) = rows_cols(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = rows_cols(self.value(p), "concat_rows")?;
            if pc != cc {
                return Err(Error::dim("columns", format!("{pc} vs {cc}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let tracked = self.tracked_any(parts);
        Ok(self.push(
            Tensor::new(vec![rows, cc], data)?,
            Op::ConcatRows(parts.to_vec()),
            tracked,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, cc) = rows_cols(self.value(a), "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::dim("rows", "gather of zero rows"));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * cc);
        for &i in rows {
            if i >= r {
                return Err(Error::dim("rows", format!("row {i} out of {r}")));
            }
            data.extend_from_slice(&src[i * cc..(i + 1) * cc]);
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(
            Tensor::new(vec![rows.len(), cc], data)?,
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    /// Copy of `base` with row `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (r, cc) = rows_cols(self.value(base), "scatter base")?;
        let (sr, sc) = rows_cols(self.value(src), "scatter source")?;
        if sc != cc || sr != rows.len() {
            return Err(Error::dim(
                "rows",
                format!("scatter of {sr}x{sc} into {r}x{cc} at {} rows", rows.len()),
            ));
        }
        let mut seen = vec![false; r];
        for &i in rows {
            if i >= r {
                return Err(Error::dim("rows", format!("row {i} out of {r}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidArgument(format!("duplicate scatter row {i}")));
            }
        }
        let mut value = self.value(base).clone();
        let s = self.value(src).data();
        for (k, &i) in rows.iter().enumerate() {
            value.data_mut()[i * cc..(i + 1) * cc].copy_from_slice(&s[k * cc..(k + 1) * cc]);
        }
        let tracked = self.tracked_any(&[base, src]);
        Ok(self.push(
            value,
            Op::ScatterRows {
                base,
                src,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    /// Repeats a `[D]` vector into `[n, D]`.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        self.value(v).expect_rank(1, "broadcast_rows")?;
        let d = self.value(v).shape()[0];
        let src = self.value(v).data();
        let data = (0..n).flat_map(|_| src.iter().copied()).collect();
        let tracked = self.is_tracked(v);
        Ok(self.push(
            Tensor::new(vec![n, d], data)?,
            Op::BroadcastRows(v),
            tracked,
        ))
    }

    /// Row `row` of `a[L,D]` as a `[D]` vector.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (r, cc) = rows_cols(self.value(a), "row")?;
        if row >= r {
            return Err(Error::dim("rows", format!("row {row} out of {r}")));
        }
        let data = self.value(a).data()[row * cc..(row + 1) * cc].to_vec();
        let tracked = self.is_tracked(a);
        Ok(self.push(Tensor::new(vec![cc], data)?, Op::Row { a, row }, tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |x, &y| x + y);
        let tracked = self.is_tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().fold(T::zero(), |x, &y| x + y) / c(v.numel() as f64);
        let tracked = self.is_tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// `1 - cos(a, b)` for two same-shape vectors; zero norm is an error.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "cosine")?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let dot = x.iter().zip(y).fold(T::zero(), |s, (&p, &q)| s + p * q);
        let na = x.iter().fold(T::zero(), |s, &p| s + p * p).sqrt();
        let nb = y.iter().fold(T::zero(), |s, &q| s + q * q).sqrt();
        if na == T::zero() || nb == T::zero() {
            return Err(Error::InvalidArgument(
                "cosine distance of a zero-norm vector".into(),
            ));
        }
        let value = Tensor::scalar(T::one() - dot / (na * nb));
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::CosineDistance { a, b }, tracked))
    }

    /// `-Σ softmax(target) · log softmax(logits)` over a vector.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var> {
        same_shape(self.value(logits), self.value(target), "cross entropy")?;
        let lq = kernels::log_softmax_row(self.value(logits).data());
        let t = self.value(target).data();
        let mut p = vec![T::zero(); t.len()];
        kernels::softmax_row(t, &mut p);
        let loss = p.iter().zip(&lq).fold(T::zero(), |s, (&pi, &l)| s - pi * l);
        let tracked = self.tracked_any(&[logits, target]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, target },
            tracked,
        ))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim(
                "loss",
                format!("backward needs a scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let factor = match self.mutation {
                Some(m) if m.op == node.op.name() => Some(c::<T>(m.factor)),
                _ => None,
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            let emit = |v: Var, g: Vec<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                let g = match factor {
                    Some(f) => g.into_iter().map(|x| x * f).collect(),
                    None => g,
                };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    slot @ None => {
                        let shape = self.nodes[v.0].value.shape().to_vec();
                        *slot = Some(Tensor::new(shape, g).expect("gradient shape"));
                    }
                }
            };
            let go = gout.data();
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Opaque(name) => {
                    return Err(Error::UnsupportedOp((*name).to_string()));
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let (gi, gk, gb) = kernels::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*kernel).data(),
                        go,
                        geom,
                    );
                    emit(*input, gi, &mut grads);
                    emit(*kernel, gk, &mut grads);
                    emit(*bias, gb, &mut grads);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if self.is_tracked(*a) {
                        let ga = kernels::matmul_nt(go, self.value(*b).data(), m, n, k);
                        emit(*a, ga, &mut grads);
                    }
                    if self.is_tracked(*b) {
                        let gb = kernels::matmul_tn(self.value(*a).data(), go, m, k, n);
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (l, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let dout = self.shape(*w)[1];
                    if self.is_tracked(*x) {
                        let gx = kernels::matmul_nt(go, self.value(*w).data(), l, dout, din);
                        emit(*x, gx, &mut grads);
                    }
                    if self.is_tracked(*w) {
                        let gw = kernels::matmul_tn(self.value(*x).data(), go, l, din, dout);
                        emit(*w, gw, &mut grads);
                    }
                    if self.is_tracked(*b) {
                        let mut gb = vec![T::zero(); dout];
                        for row in go.chunks(dout) {
                            for (a, &g) in gb.iter_mut().zip(row) {
                                *a = *a + g;
                            }
                        }
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    emit(*a, go.to_vec(), &mut grads);
                    emit(*b, go.to_vec(), &mut grads);
                }
                Op::Sub(a, b) => {
                    emit(*a, go.to_vec(), &mut grads);
                    emit(*b, go.iter().map(|&g| -g).collect(), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.is_tracked(*a) {
                        emit(
                            *a,
                            go.iter().zip(bv).map(|(&g, &y)| g * y).collect(),
                            &mut grads,
                        );
                    }
                    if self.is_tracked(*b) {
                        emit(
                            *b,
                            go.iter().zip(av).map(|(&g, &x)| g * x).collect(),
                            &mut grads,
                        );
                    }
                }
                Op::Scale(a, f) => {
                    emit(*a, go.iter().map(|&g| g * *f).collect(), &mut grads);
                }
                Op::AddRow(a, v) => {
                    emit(*a, go.to_vec(), &mut grads);
                    if self.is_tracked(*v) {
                        let d = self.shape(*v)[0];
                        let mut gv = vec![T::zero(); d];
                        for row in go.chunks(d) {
                            for (acc, &g) in gv.iter_mut().zip(row) {
                                *acc = *acc + g;
                            }
                        }
                        emit(*v, gv, &mut grads);
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    emit(
                        *a,
                        go.iter()
                            .zip(x)
                            .map(|(&g, &v)| g * kernels::gelu_grad(v))
                            .collect(),
                        &mut grads,
                    );
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let two = c::<T>(2.0);
                    emit(
                        *a,
                        go.iter().zip(x).map(|(&g, &v)| g * two * v).collect(),
                        &mut grads,
                    );
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    let sign = |v: T| {
                        if v > T::zero() {
                            T::one()
                        } else if v < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        }
                    };
                    emit(
                        *a,
                        go.iter().zip(x).map(|(&g, &v)| g * sign(v)).collect(),
                        &mut grads,
                    );
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let d = *self.shape(*x).last().expect("layer norm rank");
                    let gvals = gamma.map(|g| self.value(g).data());
                    let (gx, gg, gb) = kernels::layer_norm_backward(go, gvals, cache, d);
                    emit(*x, gx, &mut grads);
                    if let Some(g) = gamma {
                        emit(*g, gg, &mut grads);
                    }
                    if let Some(b) = beta {
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let n = self.shape(*a)[1];
                    let y = node.value.data();
                    let mut ga = vec![T::zero(); y.len()];
                    for ((grow, yrow), orow) in go.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n))
                    {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(T::zero(), |s, (&g, &p)| s + g * p);
                        for ((o, &g), &p) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = p * (g - dot);
                        }
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::Transpose(a) => {
                    let (r, cc) = (self.shape(*a)[0], self.shape(*a)[1]);
                    emit(*a, kernels::transpose(go, cc, r), &mut grads);
                }
                Op::Reshape(a) => {
                    emit(*a, go.to_vec(), &mut grads);
                }
                Op::SliceCols { a, start } => {
                    let (r, cc) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let len = node.value.shape()[1];
                    let mut ga = vec![T::zero(); r * cc];
                    for i in 0..r {
                        ga[i * cc + start..i * cc + start + len]
                            .copy_from_slice(&go[i * len..(i + 1) * len]);
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.shape(p)[1];
                        if self.is_tracked(p) {
                            let mut gp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                gp.extend_from_slice(
                                    &go[i * total + offset..i * total + offset + w],
                                );
                            }
                            emit(p, gp, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        emit(p, go[offset..offset + n].to_vec(), &mut grads);
                        offset += n;
                    }
                }
                Op::GatherRows { a, rows } => {
                    let cc = self.shape(*a)[1];
                    let mut ga = vec![T::zero(); self.value(*a).numel()];
                    for (k, &i) in rows.iter().enumerate() {
                        for j in 0..cc {
                            ga[i * cc + j] = ga[i * cc + j] + go[k * cc + j];
                        }
                    }
                    emit(*a, ga, &mut grads);
                }
                Op::ScatterRows { base, src, rows } => {
                    let cc = self.shape(*base)[1];
                    if self.is_tracked(*base) {
                        let mut gb = go.to_vec();
                        for &i in rows {
                            gb[i * cc..(i + 1) * cc]
                                .iter_mut()
                                .for_each(|v| *v = T::zero());
                        }
                        emit(*base, gb, &mut grads);
                    }
                    if self.is_tracked(*src) {
                        let mut gs = Vec::with_capacity(rows.len() * cc);
                        for &i in rows {
                            gs.extend_from_slice(&go[i * cc..(i + 1) * cc]);
                        }
                        emit(*src, gs, &mut grads);
                    }
                }
                Op::BroadcastRows(v) => {
                    let d = self.shape(*v)[0];
                    let mut gv = vec![T::zero(); d];
                    for row in go.chunks(d) {
                        for (acc, &g) in gv.iter_mut().zip(row) {
                            *acc = *acc + g;
                        }
                    }
                    emit(*v, gv, &mut grads);
                }
                Op::Row { a, row } => {
                    let cc = self.shape(*a)[1];
                    let mut ga = vec![T::zero(); self.value(*a).numel()];
                    ga[row * cc..(row + 1) * cc].copy_from_slice(go);
                    emit(*a, ga, &mut grads);
                }
                Op::Sum(a) => {
                    emit(*a, vec![go[0]; self.value(*a).numel()], &mut grads);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    emit(*a, vec![go[0] / c(n as f64); n], &mut grads);
                }
                Op::CosineDistance { a, b } => {
                    let (x, y) = (self.value(*a).data(), self.value(*b).data());
                    let dot = x.iter().zip(y).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    let na = x.iter().fold(T::zero(), |s, &p| s + p * p).sqrt();
                    let nb = y.iter().fold(T::zero(), |s, &q| s + q * q).sqrt();
                    let cos = dot / (na * nb);
                    // d(1 - cos)/dx = -(y/(|x||y|) - cos·x/|x|²)
                    if self.is_tracked(*a) {
                        let ga = x
                            .iter()
                            .zip(y)
                            .map(|(&p, &q)| -go[0] * (q / (na * nb) - cos * p / (na * na)))
                            .collect();
                        emit(*a, ga, &mut grads);
                    }
                    if self.is_tracked(*b) {
                        let gb = x
                            .iter()
                            .zip(y)
                            .map(|(&p, &q)| -go[0] * (p / (na * nb) - cos * q / (nb * nb)))
                            .collect();
                        emit(*b, gb, &mut grads);
                    }
                }
                Op::SoftCrossEntropy { logits, target } => {
                    let lq = kernels::log_softmax_row(self.value(*logits).data());
                    let t = self.value(*target).data();
                    let mut p = vec![T::zero(); t.len()];
                    kernels::softmax_row(t, &mut p);
                    if self.is_tracked(*logits) {
                        let gl = lq
                            .iter()
                            .zip(&p)
                            .map(|(&l, &pi)| go[0] * (l.exp() - pi))
                            .collect();
                        emit(*logits, gl, &mut grads);
                    }
                    if self.is_tracked(*target) {
                        let expected = p.iter().zip(&lq).fold(T::zero(), |s, (&pi, &l)| s + pi * l);
                        let gt = p
                            .iter()
                            .zip(&lq)
                            .map(|(&pi, &l)| -go[0] * pi * (l - expected))
                            .collect();
                        emit(*target, gt, &mut grads);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

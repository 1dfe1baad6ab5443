//! Reverse-mode automatic differentiation over batched tensors.
//!
//! A [`Tape`] records every operation in creation order, which is a
//! topological order; [`Tape::backward`] walks it exactly in reverse.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::inversion::InversionSystem;
use crate::linalg::{gemm, Cholesky, DenseMatrix, Layout};
use crate::scalar::Scalar;
use crate::xpra::{DiffOperators, SparseMatrix};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                what: "tensor data",
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::Contract(format!("expected a 4-D tensor, got shape {:?}", self.shape))),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A constant linear map applied independently to every row of a `[B, n]`
/// tensor.
pub trait LinearMap<T>: Send + Sync {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// `out ← A x` for `batch` stacked rows.
    fn apply(&self, x: &[T], batch: usize, out: &mut [T]);
    /// `out ← Aᵀ y` for `batch` stacked rows.
    fn apply_t(&self, y: &[T], batch: usize, out: &mut [T]);
}

/// `x ↦ s²𝒢ᵀ𝒢 x` (symmetric).
pub struct GramMap<T>(pub Arc<InversionSystem<T>>);

impl<T: Scalar> LinearMap<T> for GramMap<T> {
    fn in_dim(&self) -> usize {
        self.0.dim()
    }
    fn out_dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[T], batch: usize, out: &mut [T]) {
        dense_rows(self.0.gram(), false, x, batch, out);
    }
    fn apply_t(&self, y: &[T], batch: usize, out: &mut [T]) {
        dense_rows(self.0.gram(), false, y, batch, out);
    }
}

/// `x ↦ (D_xᵀD_x + D_yᵀD_y) x` (symmetric).
pub struct RegularizerMap<T>(pub Arc<InversionSystem<T>>);

impl<T: Scalar> LinearMap<T> for RegularizerMap<T> {
    fn in_dim(&self) -> usize {
        self.0.dim()
    }
    fn out_dim(&self) -> usize {
        self.0.dim()
    }
    fn apply(&self, x: &[T], _batch: usize, out: &mut [T]) {
        let d = self.0.dim();
        for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
            self.0.diffs().regularizer_apply_into(xr, or);
        }
    }
    fn apply_t(&self, y: &[T], batch: usize, out: &mut [T]) {
        self.apply(y, batch, out)
    }
}

/// Sparse matrix or its transpose.
pub struct SparseMap<T> {
    pub matrix: Arc<SparseMatrix<T>>,
    pub transposed: bool,
}

impl<T: Scalar> LinearMap<T> for SparseMap<T> {
    fn in_dim(&self) -> usize {
        if self.transposed { self.matrix.rows() } else { self.matrix.cols() }
    }
    fn out_dim(&self) -> usize {
        if self.transposed { self.matrix.cols() } else { self.matrix.rows() }
    }
    fn apply(&self, x: &[T], _batch: usize, out: &mut [T]) {
        let (i, o) = (self.in_dim(), self.out_dim());
        for (xr, or) in x.chunks(i).zip(out.chunks_mut(o)) {
            let y = if self.transposed { self.matrix.matvec_t(xr) } else { self.matrix.matvec(xr) };
            or.copy_from_slice(&y.expect("dimension checked on record"));
        }
    }
    fn apply_t(&self, y: &[T], _batch: usize, out: &mut [T]) {
        let (i, o) = (self.in_dim(), self.out_dim());
        for (yr, or) in y.chunks(o).zip(out.chunks_mut(i)) {
            let x = if self.transposed { self.matrix.matvec(yr) } else { self.matrix.matvec_t(yr) };
            or.copy_from_slice(&x.expect("dimension checked on record"));
        }
    }
}

/// Dense matrix or its transpose.
pub struct DenseMap<T> {
    pub matrix: Arc<DenseMatrix<T>>,
    pub transposed: bool,
}

impl<T: Scalar> LinearMap<T> for DenseMap<T> {
    fn in_dim(&self) -> usize {
        if self.transposed { self.matrix.rows() } else { self.matrix.cols() }
    }
    fn out_dim(&self) -> usize {
        if self.transposed { self.matrix.cols() } else { self.matrix.rows() }
    }
    fn apply(&self, x: &[T], batch: usize, out: &mut [T]) {
        dense_rows(&self.matrix, self.transposed, x, batch, out);
    }
    fn apply_t(&self, y: &[T], batch: usize, out: &mut [T]) {
        dense_rows(&self.matrix, !self.transposed, y, batch, out);
    }
}

// rows of `out` = A·(rows of x), with A optionally transposed
fn dense_rows<T: Scalar>(a: &DenseMatrix<T>, transposed: bool, x: &[T], batch: usize, out: &mut [T]) {
    let (r, c) = (a.rows(), a.cols());
    // out[B, o] = x[B, i] · opᵀ ; op = A (o×i) → x·Aᵀ, op = Aᵀ → x·A
    let (i, o, la) = if transposed {
        (r, c, Layout::row_major(r, c))
    } else {
        (c, r, Layout::transposed(r, c))
    };
    gemm(
        T::one(),
        x,
        Layout::row_major(batch, i),
        a.as_slice(),
        la,
        T::zero(),
        out,
        Layout::row_major(batch, o),
    )
    .expect("dimension checked on record");
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Linear(Var, Arc<dyn LinearMap<T>>),
    RegSolve {
        rhs: Var,
        lambda1: Var,
        lambda2: Var,
        factor: Arc<Cholesky<T>>,
        system: Arc<InversionSystem<T>>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    PadReplicate(Var),
    Crop(Var),
    SoftThreshold(Var, Var),
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Mse(Var, Vec<T>),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased per-channel variance.
    pub var: Vec<T>,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    // factorizations by (system, λ₁, λ₂); unrolled layers often repeat them
    factors: Vec<(usize, T, T, Arc<Cholesky<T>>)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adjoint of `v`; `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v`, zeros when unused.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); len])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), factors: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Input, parameter or constant.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = if x.len() == y.len() {
            if x.shape != y.shape {
                return Err(shape_error(&x.shape, &y.shape));
            }
            x.shape.clone()
        } else if y.len() == 1 {
            x.shape.clone()
        } else if x.len() == 1 {
            y.shape.clone()
        } else {
            return Err(shape_error(&x.shape, &y.shape));
        };
        let n = x.len().max(y.len());
        let at = |t: &Tensor<T>, i: usize| if t.len() == 1 { t.data[0] } else { t.data[i] };
        let data = (0..n).map(|i| f(at(x, i), at(y, i))).collect();
        Ok(Tensor { shape, data })
    }

    /// Elementwise sum; either operand may be a single-element scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&t| if t > T::zero() { t } else { T::zero() }).collect(),
        };
        self.push(v, Op::Relu(a))
    }

    /// Row-wise `A x` for `x` shaped `[B, n]`.
    pub fn linear(&mut self, a: Var, map: Arc<dyn LinearMap<T>>) -> Result<Var> {
        let x = self.value(a);
        let b = rows_of(x, map.in_dim())?;
        let mut out = vec![T::zero(); b * map.out_dim()];
        map.apply(&x.data, b, &mut out);
        let v = Tensor::new(vec![b, map.out_dim()], out)?;
        Ok(self.push(v, Op::Linear(a, map)))
    }

    /// Row-wise `(s²𝒢ᵀ𝒢 + λ₁I + λ₂(D_xᵀD_x + D_yᵀD_y))⁻¹ r`.
    pub fn reg_solve(&mut self, system: Arc<InversionSystem<T>>, lambda1: Var, lambda2: Var, rhs: Var) -> Result<Var> {
        let (l1, l2) = (scalar_of(self.value(lambda1))?, scalar_of(self.value(lambda2))?);
        // every cached entry has a node holding its system, so addresses stay unique
        let key = Arc::as_ptr(&system) as usize;
        let cached = self
            .factors
            .iter()
            .find(|(s, a, b, _)| *s == key && *a == l1 && *b == l2)
            .map(|entry| entry.3.clone());
        let factor = match cached {
            Some(f) => f,
            None => {
                let f = Arc::new(Cholesky::factor(&system.normal_matrix(l1, l2))?);
                self.factors.push((key, l1, l2, f.clone()));
                f
            }
        };
        let r = self.value(rhs);
        let d = system.dim();
        let b = rows_of(r, d)?;
        let mut out = Vec::with_capacity(b * d);
        for row in r.data.chunks(d) {
            out.extend(factor.solve(row)?);
        }
        let v = Tensor::new(vec![b, d], out)?;
        Ok(self.push(
            v,
            Op::RegSolve {
                rhs,
                lambda1,
                lambda2,
                factor,
                system,
            },
        ))
    }

    /// Stride-1 convolution with zero "same" padding: input `[B, Ci, H, W]`,
    /// weight `[Co, Ci, k, k]` (k odd), bias `[Co]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [b, ci, h, wd] = x.dims4()?;
        let [co, wci, k, k2] = w.dims4()?;
        if wci != ci || k != k2 || k % 2 == 0 {
            return Err(Error::Contract(format!(
                "conv weight {:?} does not fit input {:?}",
                w.shape, x.shape
            )));
        }
        if let Some(bv) = bias {
            if self.value(bv).len() != co {
                return Err(Error::Contract("conv bias length differs from output channels".into()));
            }
        }
        let hw = h * wd;
        let kk = ci * k * k;
        let mut out = vec![T::zero(); b * co * hw];
        let mut col = vec![T::zero(); kk * hw];
        for bi in 0..b {
            let xb = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
            let src: &[T] = if k == 1 {
                xb
            } else {
                im2col(xb, ci, h, wd, k, &mut col);
                &col
            };
            let ob = &mut out[bi * co * hw..(bi + 1) * co * hw];
            if let Some(bv) = bias {
                let bias = &self.nodes[bv.0].value.data;
                for (c, plane) in ob.chunks_mut(hw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = bias[c]);
                }
            }
            gemm(
                T::one(),
                &w.data,
                Layout::row_major(co, kk),
                src,
                Layout::row_major(kk, hw),
                T::one(),
                ob,
                Layout::row_major(co, hw),
            )?;
        }
        let v = Tensor::new(vec![b, co, h, wd], out)?;
        Ok(self.push(v, Op::Conv2d { input, weight, bias }))
    }

    /// Per-channel normalization over batch and space with the batch's
    /// statistics; returns the biased-mean/unbiased-variance pair for the
    /// running estimates.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4()?;
        let m = b * h * w;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let vals = channel_iter(&x.data, b, c, h * w, ch);
            let s: T = vals.clone().sum();
            let mu = s / T::from_usize_lossy(m);
            let ss: T = vals.map(|v| (v - mu) * (v - mu)).sum();
            mean[ch] = mu;
            var[ch] = ss / T::from_usize_lossy(m);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|&v| if m > 1 { v * T::from_usize_lossy(m) / T::from_usize_lossy(m - 1) } else { v })
            .collect();
        let stats = BatchStats { mean: mean.clone(), var: unbiased };
        let v = self.normalize(input, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Per-channel normalization with fixed statistics (eval mode).
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(input, gamma, beta, mean, inv_std, false)
    }

    fn normalize(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], inv_std: Vec<T>, batch_stats: bool) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4()?;
        let (g, be) = (self.value(gamma), self.value(beta));
        if g.len() != c || be.len() != c || mean.len() != c {
            return Err(Error::Contract("batch-norm parameters do not match channels".into()));
        }
        let hw = h * w;
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (x.data[i] - mean[ch]) * inv_std[ch];
                    out[i] = g.data[ch] * xhat[i] + be.data[ch];
                }
            }
        }
        let v = Tensor::new(x.shape.clone(), out)?;
        Ok(self.push(
            v,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    /// 2×2 max pooling (H and W must be even). Ties go to the first element.
    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Contract(format!("max-pool needs even dimensions, got {h}×{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for p in 0..b * c {
            let base = p * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                    out.push(x.data[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(v, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [b, c, h, w] = x.dims4()?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * ho * wo];
        for p in 0..b * c {
            for i in 0..ho {
                for j in 0..wo {
                    out[p * ho * wo + i * wo + j] = x.data[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let v = Tensor::new(vec![b, c, ho, wo], out)?;
        Ok(self.push(v, Op::Upsample2(input)))
    }

    /// Concatenation along axis 1 of tensors that agree elsewhere.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Contract("empty concat".into()))?);
        let batch = first.shape[0];
        let tail: Vec<usize> = first.shape[2..].to_vec();
        let inner: usize = tail.iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = &self.value(p).shape;
            if s.len() != first.shape.len() || s[0] != batch || s[2..] != tail[..] {
                return Err(shape_error(&first.shape, s));
            }
            channels += s[1];
        }
        let mut out = Vec::with_capacity(batch * channels * inner);
        for bi in 0..batch {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape[1] * inner;
                out.extend_from_slice(&t.data[bi * chunk..(bi + 1) * chunk]);
            }
        }
        let mut shape = vec![batch, channels];
        shape.extend(tail);
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Entries `start..start+len` along axis 1.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if x.shape.len() < 2 || start + len > x.shape[1] {
            return Err(Error::Contract(format!("slice {start}+{len} out of range for {:?}", x.shape)));
        }
        let inner: usize = x.shape[2..].iter().product();
        let (b, c) = (x.shape[0], x.shape[1]);
        let mut out = Vec::with_capacity(b * len * inner);
        for bi in 0..b {
            let off = (bi * c + start) * inner;
            out.extend_from_slice(&x.data[off..off + len * inner]);
        }
        let mut shape = x.shape.clone();
        shape[1] = len;
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::Slice { input, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        let v = Tensor::new(shape, x.data.clone())?;
        Ok(self.push(v, Op::Reshape(input)))
    }

    /// Pads the two trailing axes to `h × w` by repeating the last row/column.
    pub fn pad_replicate(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        let [b, c, hi, wi] = x.dims4()?;
        if h < hi || w < wi || hi == 0 || wi == 0 {
            return Err(Error::Contract("padding cannot shrink a tensor".into()));
        }
        let mut out = vec![T::zero(); b * c * h * w];
        for p in 0..b * c {
            for i in 0..h {
                for j in 0..w {
                    out[p * h * w + i * w + j] = x.data[p * hi * wi + i.min(hi - 1) * wi + j.min(wi - 1)];
                }
            }
        }
        let v = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(v, Op::PadReplicate(input)))
    }

    /// Keeps the leading `h × w` block of the two trailing axes.
    pub fn crop(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(input);
        let [b, c, hi, wi] = x.dims4()?;
        if h > hi || w > wi {
            return Err(Error::Contract("crop larger than tensor".into()));
        }
        let mut out = Vec::with_capacity(b * c * h * w);
        for p in 0..b * c {
            for i in 0..h {
                let off = p * hi * wi + i * wi;
                out.extend_from_slice(&x.data[off..off + w]);
            }
        }
        let v = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(v, Op::Crop(input)))
    }

    /// `sign(x)·max(|x| − t, 0)` with a scalar threshold variable.
    pub fn soft_threshold(&mut self, input: Var, threshold: Var) -> Result<Var> {
        let t = scalar_of(self.value(threshold))?;
        let x = self.value(input);
        let v = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| crate::inversion::soft_threshold(v, t)).collect(),
        };
        Ok(self.push(v, Op::SoftThreshold(input, threshold)))
    }

    /// `y = W x + c` row-wise: input `[B, n]`, weight `[m, n]`, bias `[m]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let c = self.value(bias);
        let (m, n) = match w.shape[..] {
            [m, n] => (m, n),
            _ => return Err(Error::Contract("affine weight must be 2-D".into())),
        };
        if c.len() != m {
            return Err(Error::Contract("affine bias length differs from output size".into()));
        }
        let b = rows_of(x, n)?;
        let mut out: Vec<T> = (0..b).flat_map(|_| c.data.iter().copied()).collect();
        gemm(
            T::one(),
            &x.data,
            Layout::row_major(b, n),
            &w.data,
            Layout::transposed(m, n),
            T::one(),
            &mut out,
            Layout::row_major(b, m),
        )?;
        let v = Tensor::new(vec![b, m], out)?;
        Ok(self.push(v, Op::Affine { input, weight, bias }))
    }

    /// Mean of `(x − target)²` over all entries.
    pub fn mse(&mut self, input: Var, target: &[T]) -> Result<Var> {
        let x = self.value(input);
        if x.len() != target.len() || x.is_empty() {
            return Err(Error::Dimension {
                what: "loss target",
                expected: x.len(),
                got: target.len(),
            });
        }
        let s: T = x.data.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let v = Tensor::scalar(s / T::from_usize_lossy(x.len()));
        Ok(self.push(v, Op::Mse(input, target.to_vec())))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate_broadcast(grads, self, *a, g, |gi, _| gi);
                accumulate_broadcast(grads, self, *b, g, |gi, _| gi);
            }
            Op::Sub(a, b) => {
                accumulate_broadcast(grads, self, *a, g, |gi, _| gi);
                accumulate_broadcast(grads, self, *b, g, |gi, _| -gi);
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (&self.value(*a).data, &self.value(*b).data);
                accumulate_broadcast(grads, self, *a, g, |gi, k| gi * bcast(xb, k));
                accumulate_broadcast(grads, self, *b, g, |gi, k| gi * bcast(xa, k));
            }
            Op::Div(a, b) => {
                let (xa, xb) = (&self.value(*a).data, &self.value(*b).data);
                accumulate_broadcast(grads, self, *a, g, |gi, k| gi / bcast(xb, k));
                accumulate_broadcast(grads, self, *b, g, |gi, k| {
                    let d = bcast(xb, k);
                    -gi * bcast(xa, k) / (d * d)
                });
            }
            Op::Relu(a) => {
                let x = &self.value(*a).data;
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Linear(a, map) => {
                let b = self.value(*a).shape[0];
                let mut d = vec![T::zero(); b * map.in_dim()];
                map.apply_t(g, b, &mut d);
                accumulate(grads, *a, &d);
            }
            Op::RegSolve {
                rhs,
                lambda1,
                lambda2,
                factor,
                system,
            } => {
                let d = system.dim();
                let x = &node.value.data;
                let mut w = Vec::with_capacity(g.len());
                for row in g.chunks(d) {
                    w.extend(factor.solve(row)?);
                }
                let mut l1 = T::zero();
                let mut l2 = T::zero();
                let mut lap = vec![T::zero(); d];
                for (wr, xr) in w.chunks(d).zip(x.chunks(d)) {
                    system.diffs().regularizer_apply_into(xr, &mut lap);
                    for k in 0..d {
                        l1 -= wr[k] * xr[k];
                        l2 -= wr[k] * lap[k];
                    }
                }
                accumulate(grads, *rhs, &w);
                accumulate(grads, *lambda1, &[l1]);
                accumulate(grads, *lambda2, &[l2]);
            }
            Op::Conv2d { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let [b, ci, h, wd] = x.dims4()?;
                let [co, _, k, _] = wt.dims4()?;
                let hw = h * wd;
                let kk = ci * k * k;
                let mut dw = vec![T::zero(); wt.len()];
                let mut dx = vec![T::zero(); x.len()];
                let mut col = vec![T::zero(); kk * hw];
                let mut dcol = vec![T::zero(); kk * hw];
                for bi in 0..b {
                    let xb = &x.data[bi * ci * hw..(bi + 1) * ci * hw];
                    let gb = &g[bi * co * hw..(bi + 1) * co * hw];
                    let src: &[T] = if k == 1 {
                        xb
                    } else {
                        im2col(xb, ci, h, wd, k, &mut col);
                        &col
                    };
                    // dW += G_b · colᵀ
                    gemm(
                        T::one(),
                        gb,
                        Layout::row_major(co, hw),
                        src,
                        Layout::transposed(kk, hw),
                        T::one(),
                        &mut dw,
                        Layout::row_major(co, kk),
                    )?;
                    // dcol = Wᵀ · G_b
                    let dxb = &mut dx[bi * ci * hw..(bi + 1) * ci * hw];
                    if k == 1 {
                        gemm(
                            T::one(),
                            &wt.data,
                            Layout::transposed(co, kk),
                            gb,
                            Layout::row_major(co, hw),
                            T::zero(),
                            dxb,
                            Layout::row_major(kk, hw),
                        )?;
                    } else {
                        gemm(
                            T::one(),
                            &wt.data,
                            Layout::transposed(co, kk),
                            gb,
                            Layout::row_major(co, hw),
                            T::zero(),
                            &mut dcol,
                            Layout::row_major(kk, hw),
                        )?;
                        col2im(&dcol, ci, h, wd, k, dxb);
                    }
                }
                accumulate(grads, *input, &dx);
                accumulate(grads, *weight, &dw);
                if let Some(bv) = bias {
                    let mut db = vec![T::zero(); co];
                    for bi in 0..b {
                        for (c, plane) in g[bi * co * hw..(bi + 1) * co * hw].chunks(hw).enumerate() {
                            db[c] += plane.iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, *bv, &db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let x = self.value(*input);
                let [b, c, h, w] = x.dims4()?;
                let hw = h * w;
                let gam = &self.value(*gamma).data;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                let mut dx = vec![T::zero(); x.len()];
                let m = T::from_usize_lossy(b * hw);
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let scale = gam[ch] * inv_std[ch];
                        for k in off..off + hw {
                            dx[k] = if *batch_stats {
                                scale * (g[k] - dbeta[ch] / m - xhat[k] * dgamma[ch] / m)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                accumulate(grads, *input, &dx);
                accumulate(grads, *gamma, &dgamma);
                accumulate(grads, *beta, &dbeta);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&gi, &k) in g.iter().zip(argmax) {
                    dx[k] += gi;
                }
                accumulate(grads, *input, &dx);
            }
            Op::Upsample2(input) => {
                let x = self.value(*input);
                let [b, c, h, w] = x.dims4()?;
                let wo = 2 * w;
                let mut dx = vec![T::zero(); x.len()];
                for p in 0..b * c {
                    for i in 0..2 * h {
                        for j in 0..wo {
                            dx[p * h * w + (i / 2) * w + j / 2] += g[p * 4 * h * w + i * wo + j];
                        }
                    }
                }
                accumulate(grads, *input, &dx);
            }
            Op::Concat(parts) => {
                let batch = node.value.shape[0];
                let inner: usize = node.value.shape[2..].iter().product();
                let total = node.value.shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.value(p).shape[1] * inner;
                    let mut d = Vec::with_capacity(batch * chunk);
                    for bi in 0..batch {
                        let o = bi * total + offset;
                        d.extend_from_slice(&g[o..o + chunk]);
                    }
                    accumulate(grads, p, &d);
                    offset += chunk;
                }
            }
            Op::Slice { input, start } => {
                let x = self.value(*input);
                let inner: usize = x.shape[2..].iter().product();
                let (b, c) = (x.shape[0], x.shape[1]);
                let len = node.value.shape[1];
                let mut dx = vec![T::zero(); x.len()];
                for bi in 0..b {
                    let o = (bi * c + start) * inner;
                    dx[o..o + len * inner].copy_from_slice(&g[bi * len * inner..(bi + 1) * len * inner]);
                }
                accumulate(grads, *input, &dx);
            }
            Op::Reshape(input) => accumulate(grads, *input, g),
            Op::PadReplicate(input) => {
                let x = self.value(*input);
                let [b, c, hi, wi] = x.dims4()?;
                let [_, _, h, w] = node.value.dims4()?;
                let mut dx = vec![T::zero(); x.len()];
                for p in 0..b * c {
                    for i in 0..h {
                        for j in 0..w {
                            dx[p * hi * wi + i.min(hi - 1) * wi + j.min(wi - 1)] += g[p * h * w + i * w + j];
                        }
                    }
                }
                accumulate(grads, *input, &dx);
            }
            Op::Crop(input) => {
                let x = self.value(*input);
                let [b, c, hi, wi] = x.dims4()?;
                let [_, _, h, w] = node.value.dims4()?;
                let mut dx = vec![T::zero(); x.len()];
                for p in 0..b * c {
                    for i in 0..h {
                        let o = p * hi * wi + i * wi;
                        dx[o..o + w].copy_from_slice(&g[(p * h + i) * w..(p * h + i) * w + w]);
                    }
                }
                accumulate(grads, *input, &dx);
            }
            Op::SoftThreshold(input, threshold) => {
                let t = scalar_of(self.value(*threshold))?;
                let x = &self.value(*input).data;
                let mut dx = vec![T::zero(); x.len()];
                let mut dt = T::zero();
                for (k, (&gi, &xi)) in g.iter().zip(x).enumerate() {
                    if xi > t {
                        dx[k] = gi;
                        dt -= gi;
                    } else if xi < -t {
                        dx[k] = gi;
                        dt += gi;
                    }
                }
                accumulate(grads, *input, &dx);
                accumulate(grads, *threshold, &[dt]);
            }
            Op::Affine { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, n) = (w.shape[0], w.shape[1]);
                let b = x.shape[0];
                let mut dx = vec![T::zero(); x.len()];
                gemm(
                    T::one(),
                    g,
                    Layout::row_major(b, m),
                    &w.data,
                    Layout::row_major(m, n),
                    T::zero(),
                    &mut dx,
                    Layout::row_major(b, n),
                )?;
                let mut dw = vec![T::zero(); w.len()];
                gemm(
                    T::one(),
                    g,
                    Layout::transposed(b, m),
                    &x.data,
                    Layout::row_major(b, n),
                    T::zero(),
                    &mut dw,
                    Layout::row_major(m, n),
                )?;
                let mut dc = vec![T::zero(); m];
                for row in g.chunks(m) {
                    for (a, &v) in dc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                accumulate(grads, *input, &dx);
                accumulate(grads, *weight, &dw);
                accumulate(grads, *bias, &dc);
            }
            Op::Mse(input, target) => {
                let x = &self.value(*input).data;
                let scale = T::c(2.0) * g[0] / T::from_usize_lossy(x.len());
                let d: Vec<T> = x.iter().zip(target).map(|(&a, &b)| scale * (a - b)).collect();
                accumulate(grads, *input, &d);
            }
            Op::Sum(input) => {
                let d = vec![g[0]; self.value(*input).len()];
                accumulate(grads, *input, &d);
            }
        }
        Ok(())
    }

    /// L2 norm of every node value, for diagnostics.
    pub fn activation_norms(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|n| n.value.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

/// Builds `D_x`/`D_y` maps and their transposes for a system.
pub fn diff_maps<T: Scalar>(diffs: &DiffOperators<T>) -> [Arc<dyn LinearMap<T>>; 4] {
    let dx = Arc::new(diffs.dx.clone());
    let dy = Arc::new(diffs.dy.clone());
    [
        Arc::new(SparseMap { matrix: dx.clone(), transposed: false }),
        Arc::new(SparseMap { matrix: dx, transposed: true }),
        Arc::new(SparseMap { matrix: dy.clone(), transposed: false }),
        Arc::new(SparseMap { matrix: dy, transposed: true }),
    ]
}

fn shape_error(a: &[usize], b: &[usize]) -> Error {
    Error::Contract(format!("incompatible shapes {a:?} and {b:?}"))
}

fn scalar_of<T: Scalar>(t: &Tensor<T>) -> Result<T> {
    if t.len() != 1 {
        return Err(Error::Contract(format!("expected a scalar, got shape {:?}", t.shape)));
    }
    Ok(t.data[0])
}

fn rows_of<T>(t: &Tensor<T>, width: usize) -> Result<usize> {
    match t.shape[..] {
        [b, n] if n == width => Ok(b),
        _ => Err(Error::Contract(format!(
            "expected shape [B, {width}], got {:?}",
            t.shape
        ))),
    }
}

#[inline]
fn bcast<T: Copy>(v: &[T], k: usize) -> T {
    if v.len() == 1 { v[0] } else { v[k] }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: &[T]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(d).for_each(|(a, &b)| *a += b),
        slot => *slot = Some(d.to_vec()),
    }
}

// gradient through a possibly broadcast operand: sums over the broadcast axis
fn accumulate_broadcast<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    tape: &Tape<T>,
    v: Var,
    g: &[T],
    f: impl Fn(T, usize) -> T,
) {
    if tape.value(v).len() == 1 && g.len() != 1 {
        let s = g.iter().enumerate().fold(T::zero(), |acc, (k, &gi)| acc + f(gi, k));
        accumulate(grads, v, &[s]);
    } else {
        let d: Vec<T> = g.iter().enumerate().map(|(k, &gi)| f(gi, k)).collect();
        accumulate(grads, v, &d);
    }
}

fn channel_iter<T: Copy>(data: &[T], b: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = T> + Clone + '_ {
    (0..b).flat_map(move |bi| data[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied())
}

// [Ci, H, W] → [Ci·k·k, H·W] with zero padding k/2
fn im2col<T: Scalar>(x: &[T], ci: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - p;
                    let dst = &mut col[row + i * w..row + (i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[c * hw + si as usize * w..c * hw + (si as usize + 1) * w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let sj = j as isize + kj as isize - p;
                        *d = if sj < 0 || sj >= w as isize { T::zero() } else { src[sj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], ci: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    x.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..ci {
        for ki in 0..k {
            for kj in 0..k {
                let row = ((c * k + ki) * k + kj) * hw;
                for i in 0..h {
                    let si = i as isize + ki as isize - p;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j as isize + kj as isize - p;
                        if sj >= 0 && sj < w as isize {
                            x[c * hw + si as usize * w + sj as usize] += col[row + i * w + j];
                        }
                    }
                }
            }
        }
    }
}

//! Forward definitions of every primitive.

use crate::error::{GradError, Result};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{self, axis_split};
use crate::tensor::{broadcast_map, broadcast_shape, expand, Tensor};

/// Largest argument passed to `exp`; keeps the result finite.
pub const EXP_CLAMP: f64 = 700.0;
/// Added to vector norms in cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

impl Graph {
    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(GradError::BadAxis {
                op,
                axis,
                shape: self.shape(x).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let ia = broadcast_map(&shape, ta.shape());
        let ib = broadcast_map(&shape, tb.shape());
        let (da, db) = (ta.data(), tb.data());
        let n = ia.len();
        Ok(Tensor::from_fn(shape, |i| {
            debug_assert!(i < n);
            f(da[ia[i]], db[ib[i]])
        }))
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.value(x).map(f)
    }

    /// Matrix product. `b` is either 2-D (`[k, n]`, applied to the last axis of
    /// `a`) or shares all leading batch axes with `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || GradError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.is_empty() || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = *sa.last().unwrap();
        let value = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            let m = self.value(a).numel() / k;
            let n = sb[1];
            let mut c = vec![0.0; m * n];
            kernels::gemm(
                m,
                k,
                n,
                self.value(a).data(),
                false,
                self.value(b).data(),
                false,
                &mut c,
                false,
            );
            let mut shape = sa.clone();
            *shape.last_mut().unwrap() = n;
            Tensor::new(shape, c)?
        } else {
            if sa.len() != sb.len()
                || sa[..sa.len() - 2] != sb[..sb.len() - 2]
                || sb[sb.len() - 2] != k
            {
                return Err(mismatch());
            }
            let m = sa[sa.len() - 2];
            let n = sb[sb.len() - 1];
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let mut c = vec![0.0; batch * m * n];
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    false,
                    &mut c[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = sa[..sa.len() - 2].to_vec();
            shape.extend([m, n]);
            Tensor::new(shape, c)?
        };
        self.push(value, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(v, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("div", a, b, |x, y| x / y)?;
        self.push(v, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.unary(x, |a| a * c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.unary(x, |a| a + c);
        self.push(v, Op::AddScalar { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, f64::abs);
        self.push(v, Op::Abs { x })
    }

    /// Elementwise minimum; at ties the gradient flows to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("elementwise-min", a, b, |x, y| if y < x { y } else { x })?;
        self.push(v, Op::Min { a, b })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, kernels::sigmoid);
        self.push(v, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.max(0.0));
        self.push(v, Op::Relu { x })
    }

    /// `exp`, with the argument clamped to [`EXP_CLAMP`].
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(x, |a| a.min(EXP_CLAMP).exp());
        self.push(v, Op::Exp { x })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a <= 0.0) {
            return Err(GradError::Invalid {
                op: "log",
                msg: "argument must be strictly positive".into(),
            });
        }
        let v = self.unary(x, f64::ln);
        self.push(v, Op::Log { x })
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let v = self.unary(x, |a| a.powf(p));
        self.push(v, Op::Pow { x, p })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (d[at(j)] - m).exp();
                    d[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    d[at(j)] /= s;
                }
            }
        }
        self.push(out, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log-softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = t.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|j| (d[at(j)] - m).exp()).sum::<f64>().ln();
                for j in 0..len {
                    d[at(j)] -= lse;
                }
            }
        }
        self.push(out, Op::LogSoftmax { x, axis })
    }

    /// Normalizes over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let w = *t.shape().last().ok_or_else(|| GradError::Invalid {
            op: "layer-normalize",
            msg: "scalar input".into(),
        })?;
        let rows = t.numel() / w;
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in out.data_mut().chunks_mut(w) {
            let mu = r.iter().sum::<f64>() / w as f64;
            let var = r.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            r.iter_mut().for_each(|a| *a = (*a - mu) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Training-mode batch normalization of a `[rows, features]` matrix using the
    /// batch statistics of each column. Returns the normalized output together
    /// with the per-feature batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        if t.ndim() != 2 {
            return Err(GradError::Invalid {
                op: "batch-normalize",
                msg: format!("expected a 2-D input, got {:?}", t.shape()),
            });
        }
        let (r, f) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in d.chunks(f) {
            for (m, a) in mean.iter_mut().zip(row) {
                *m += a;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        for row in d.chunks(f) {
            for j in 0..f {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = Tensor::from_fn([r, f], |i| (d[i] - mean[i % f]) * inv_std[i % f]);
        let v = self.push(out, Op::BatchNorm { x, inv_std })?;
        Ok((v, mean, var))
    }

    fn reduce(&self, x: Var, axis: usize, scale: f64) -> Tensor {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Tensor::new(shape, out).expect("reduction shape")
    }

    /// Sum over `axis`; the axis is removed from the output shape.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", x, axis)?;
        let v = self.reduce(x, axis, 1.0);
        self.push(v, Op::Sum { x, axis })
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean", x, axis)?;
        let len = self.shape(x)[axis] as f64;
        let v = self.reduce(x, axis, 1.0 / len);
        self.push(v, Op::Mean { x, axis })
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean(flat, 0)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| GradError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(GradError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis];
                out.extend_from_slice(
                    &self.value(x).data()[o * len * inner..(o + 1) * len * inner],
                );
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape.to_vec())?;
        self.push(v, Op::Reshape { x })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = permute_tensor(self.value(x), axes)?;
        self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(GradError::Invalid {
                op: "transpose",
                msg: format!("needs at least 2 axes, got {:?}", self.shape(x)),
            });
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(x, &axes)
    }

    /// Cosine similarity along `axis` after broadcasting `a` and `b`; the axis
    /// is removed. Norms are offset by [`COSINE_EPS`].
    pub fn cosine_similarity(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = broadcast_shape("cosine-similarity", self.shape(a), self.shape(b))?;
        if axis >= shape.len() {
            return Err(GradError::BadAxis {
                op: "cosine-similarity",
                axis,
                shape,
            });
        }
        let ea = expand(self.value(a), &shape);
        let eb = expand(self.value(b), &shape);
        let parts = cosine_parts(&ea, &eb, &shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let v = Tensor::new(out_shape, parts.iter().map(|p| p.cos).collect())?;
        self.push(v, Op::Cosine { a, b, axis })
    }

    /// Same-padded stride-1 2-D convolution. `x: [n, cin, h, w]`, `w: [cout, cin, kh, kw]`
    /// with odd kernel sizes.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(GradError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let hw = h * wd;
        let kk = cin * kh * kw;
        let mut out = vec![0.0; n * cout * hw];
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            let col = kernels::im2col(&dx[i * cin * hw..(i + 1) * cin * hw], cin, h, wd, kh, kw);
            kernels::gemm(
                cout,
                kk,
                hw,
                dw,
                false,
                &col,
                false,
                &mut out[i * cout * hw..(i + 1) * cout * hw],
                false,
            );
        }
        let v = Tensor::new([n, cout, h, wd], out)?;
        self.push(v, Op::Conv2d { x, w })
    }

    /// 2x2 average pooling over the last two axes of `[n, c, h, w]` (even `h`, `w`).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(GradError::Invalid {
                op: "avg-pool2",
                msg: format!("expected [n, c, even h, even w], got {s:?}"),
            });
        }
        let (h2, w2) = (s[2] / 2, s[3] / 2);
        let d = self.value(x).data();
        let planes = s[0] * s[1];
        let v = Tensor::from_fn([s[0], s[1], h2, w2], |i| {
            let p = i / (h2 * w2);
            let (y, xx) = ((i % (h2 * w2)) / w2, i % w2);
            debug_assert!(p < planes);
            let base = p * s[2] * s[3];
            let at = |yy: usize, xc: usize| d[base + yy * s[3] + xc];
            0.25 * (at(2 * y, 2 * xx)
                + at(2 * y, 2 * xx + 1)
                + at(2 * y + 1, 2 * xx)
                + at(2 * y + 1, 2 * xx + 1))
        });
        self.push(v, Op::AvgPool2 { x })
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(GradError::Invalid {
                op: "upsample2",
                msg: format!("expected [n, c, h, w], got {s:?}"),
            });
        }
        let (h2, w2) = (s[2] * 2, s[3] * 2);
        let d = self.value(x).data();
        let v = Tensor::from_fn([s[0], s[1], h2, w2], |i| {
            let p = i / (h2 * w2);
            let (y, xx) = ((i % (h2 * w2)) / w2, i % w2);
            d[p * s[2] * s[3] + (y / 2) * s[3] + xx / 2]
        });
        self.push(v, Op::Upsample2 { x })
    }
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let s = t.shape();
    let mut seen = vec![false; s.len()];
    if axes.len() != s.len()
        || axes
            .iter()
            .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
    {
        return Err(GradError::Invalid {
            op: "permute",
            msg: format!("axes {axes:?} are not a permutation for shape {s:?}"),
        });
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
    let in_strides = crate::tensor::strides(s);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let d = t.data();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; s.len()];
    let mut off = 0usize;
    for _ in 0..t.numel() {
        out.push(d[off]);
        for k in (0..out_shape.len()).rev() {
            idx[k] += 1;
            off += src_strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= src_strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) struct CosineParts {
    pub dot: f64,
    pub na: f64,
    pub nb: f64,
    pub cos: f64,
}

/// Per-output dot product, norms and cosine of two equally shaped tensors along `axis`.
pub(crate) fn cosine_parts(
    a: &Tensor,
    b: &Tensor,
    shape: &[usize],
    axis: usize,
) -> Vec<CosineParts> {
    let (outer, len, inner) = axis_split(shape, axis);
    let (da, db) = (a.data(), b.data());
    let mut parts = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let (mut dot, mut sa, mut sb) = (0.0, 0.0, 0.0);
            for j in 0..len {
                let k = (o * len + j) * inner + i;
                dot += da[k] * db[k];
                sa += da[k] * da[k];
                sb += db[k] * db[k];
            }
            let (na, nb) = (sa.sqrt(), sb.sqrt());
            parts.push(CosineParts {
                dot,
                na,
                nb,
                cos: dot / ((na + COSINE_EPS) * (nb + COSINE_EPS)),
            });
        }
    }
    parts
}

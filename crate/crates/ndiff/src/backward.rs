//! Reverse pass: vector-Jacobian products for every primitive.

use crate::error::{GradError, Result};
use crate::graph::{Graph, Op, Var};
use crate::kernels::{self, axis_split};
use crate::ops::{cosine_parts, permute_tensor, COSINE_EPS, EXP_CLAMP};
use crate::tensor::{broadcast_map, expand, reduce_to, Tensor};

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when `v` did not influence the root.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    /// Reverse-mode sweep from a one-element `root`. The graph is not modified,
    /// so repeated calls return identical gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(GradError::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_val.shape().to_vec(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.vjp(Var(id), &g) {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, out: Var, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[out.0];
        let y = &node.value;
        let val = |v: Var| self.value(v);
        let want = |v: Var| self.requires_grad(v);
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let k = *ta.shape().last().unwrap();
                if tb.ndim() == 2 {
                    let n = tb.shape()[1];
                    let m = ta.numel() / k;
                    if want(*a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                        res.push((*a, Tensor::new(ta.shape().to_vec(), ga).unwrap()));
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                        res.push((*b, Tensor::new(tb.shape().to_vec(), gb).unwrap()));
                    }
                } else {
                    let s = ta.shape();
                    let m = s[s.len() - 2];
                    let n = *tb.shape().last().unwrap();
                    let batch = ta.numel() / (m * k);
                    let gd = g.data();
                    if want(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        for i in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &tb.data()[i * k * n..(i + 1) * k * n],
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                false,
                            );
                        }
                        res.push((*a, Tensor::new(s.to_vec(), ga).unwrap()));
                    }
                    if want(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        for i in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &ta.data()[i * m * k..(i + 1) * m * k],
                                true,
                                &gd[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                false,
                            );
                        }
                        res.push((*b, Tensor::new(tb.shape().to_vec(), gb).unwrap()));
                    }
                }
            }
            Op::Add { a, b } => {
                res.push((*a, reduce_to(g, val(*a).shape())));
                res.push((*b, reduce_to(g, val(*b).shape())));
            }
            Op::Sub { a, b } => {
                res.push((*a, reduce_to(g, val(*a).shape())));
                res.push((*b, reduce_to(&g.map(|x| -x), val(*b).shape())));
            }
            Op::Mul { a, b } | Op::Div { a, b } | Op::Min { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let ia = broadcast_map(y.shape(), ta.shape());
                let ib = broadcast_map(y.shape(), tb.shape());
                let (da, db) = (ta.data(), tb.data());
                let (ga, gb): (Vec<f64>, Vec<f64>) = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let (x, z) = (da[ia[i]], db[ib[i]]);
                        match &node.op {
                            Op::Mul { .. } => (gi * z, gi * x),
                            Op::Div { .. } => (gi / z, -gi * x / (z * z)),
                            _ => {
                                if z < x {
                                    (0.0, gi)
                                } else {
                                    (gi, 0.0)
                                }
                            }
                        }
                    })
                    .unzip();
                let shape = y.shape().to_vec();
                res.push((
                    *a,
                    reduce_to(&Tensor::new(shape.clone(), ga).unwrap(), ta.shape()),
                ));
                res.push((*b, reduce_to(&Tensor::new(shape, gb).unwrap(), tb.shape())));
            }
            Op::Scale { x, c } => res.push((*x, g.map(|v| v * c))),
            Op::AddScalar { x } | Op::Reshape { x } => {
                res.push((*x, g.reshaped(val(*x).shape().to_vec()).unwrap()))
            }
            Op::Abs { x } => res.push((*x, zip(g, val(*x), |gi, xi| gi * sign(xi)))),
            Op::Sigmoid { x } => res.push((*x, zip(g, y, |gi, yi| gi * yi * (1.0 - yi)))),
            Op::Relu { x } => res.push((
                *x,
                zip(g, val(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 }),
            )),
            Op::Exp { x } => {
                let tx = val(*x);
                let d = Tensor::from_fn(y.shape().to_vec(), |i| {
                    if tx.data()[i] > EXP_CLAMP {
                        0.0
                    } else {
                        g.data()[i] * y.data()[i]
                    }
                });
                res.push((*x, d));
            }
            Op::Log { x } => res.push((*x, zip(g, val(*x), |gi, xi| gi / xi))),
            Op::Pow { x, p } => res.push((*x, zip(g, val(*x), |gi, xi| gi * p * xi.powf(p - 1.0)))),
            Op::Softmax { x, axis } => {
                // dx = y * (g - sum(g * y))
                let gy = zip(g, y, |a, b| a * b);
                let s = axis_sum_keep(&gy, *axis);
                let d = Tensor::from_fn(y.shape().to_vec(), |i| {
                    y.data()[i] * (g.data()[i] - s.data()[i])
                });
                res.push((*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                // dx = g - softmax * sum(g)
                let s = axis_sum_keep(g, *axis);
                let d = Tensor::from_fn(y.shape().to_vec(), |i| {
                    g.data()[i] - y.data()[i].exp() * s.data()[i]
                });
                res.push((*x, d));
            }
            Op::LayerNorm { x, inv_std } => {
                let w = *y.shape().last().unwrap();
                let mut d = vec![0.0; y.numel()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * w..(r + 1) * w];
                    let yr = &y.data()[r * w..(r + 1) * w];
                    let mg = gr.iter().sum::<f64>() / w as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
                    for j in 0..w {
                        d[r * w + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                res.push((*x, Tensor::new(y.shape().to_vec(), d).unwrap()));
            }
            Op::BatchNorm { x, inv_std } => {
                let (rows, f) = (y.shape()[0], y.shape()[1]);
                let mut mg = vec![0.0; f];
                let mut mgy = vec![0.0; f];
                for i in 0..rows * f {
                    mg[i % f] += g.data()[i];
                    mgy[i % f] += g.data()[i] * y.data()[i];
                }
                let d = Tensor::from_fn([rows, f], |i| {
                    let j = i % f;
                    inv_std[j]
                        * (g.data()[i] - mg[j] / rows as f64 - y.data()[i] * mgy[j] / rows as f64)
                });
                res.push((*x, d));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = val(*x).shape();
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / xs[*axis] as f64
                } else {
                    1.0
                };
                let mut keep = xs.to_vec();
                keep[*axis] = 1;
                let gk = g.reshaped(keep).unwrap();
                res.push((*x, expand(&gk, xs).map(|v| v * scale)));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut start = 0;
                for &x in xs {
                    let s = val(x).shape();
                    let len = s[*axis];
                    if want(x) {
                        let mut d = Vec::with_capacity(val(x).numel());
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        res.push((x, Tensor::new(s.to_vec(), d).unwrap()));
                    }
                    start += len;
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                res.push((*x, permute_tensor(g, &inv).unwrap()));
            }
            Op::Cosine { a, b, axis } => {
                let shape = {
                    let mut s = y.shape().to_vec();
                    let full = crate::tensor::broadcast_shape(
                        "cosine-similarity",
                        val(*a).shape(),
                        val(*b).shape(),
                    )
                    .unwrap();
                    s.insert(*axis, full[*axis]);
                    s
                };
                let ea = expand(val(*a), &shape);
                let eb = expand(val(*b), &shape);
                let parts = cosine_parts(&ea, &eb, &shape, *axis);
                let (outer, len, inner) = axis_split(&shape, *axis);
                let mut ga = vec![0.0; ea.numel()];
                let mut gb = vec![0.0; eb.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let p = &parts[o * inner + i];
                        let gi = g.data()[o * inner + i];
                        let den = (p.na + COSINE_EPS) * (p.nb + COSINE_EPS);
                        for j in 0..len {
                            let k = (o * len + j) * inner + i;
                            let (xa, xb) = (ea.data()[k], eb.data()[k]);
                            let ua = if p.na > 0.0 { xa / p.na } else { 0.0 };
                            let ub = if p.nb > 0.0 { xb / p.nb } else { 0.0 };
                            ga[k] = gi * (xb / den - p.dot * ua / ((p.na + COSINE_EPS) * den));
                            gb[k] = gi * (xa / den - p.dot * ub / ((p.nb + COSINE_EPS) * den));
                        }
                    }
                }
                res.push((
                    *a,
                    reduce_to(&Tensor::new(shape.clone(), ga).unwrap(), val(*a).shape()),
                ));
                res.push((
                    *b,
                    reduce_to(&Tensor::new(shape, gb).unwrap(), val(*b).shape()),
                ));
            }
            Op::Conv2d { x, w } => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, cin, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let (cout, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let hw = h * wd;
                let kk = cin * kh * kw;
                let mut gx = vec![0.0; tx.numel()];
                let mut gw = vec![0.0; tw.numel()];
                for i in 0..n {
                    let gi = &g.data()[i * cout * hw..(i + 1) * cout * hw];
                    if want(*w) {
                        let col = kernels::im2col(
                            &tx.data()[i * cin * hw..(i + 1) * cin * hw],
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                        );
                        kernels::gemm(cout, hw, kk, gi, false, &col, true, &mut gw, true);
                    }
                    if want(*x) {
                        let mut dcol = vec![0.0; kk * hw];
                        kernels::gemm(kk, cout, hw, tw.data(), true, gi, false, &mut dcol, false);
                        kernels::col2im(
                            &dcol,
                            &mut gx[i * cin * hw..(i + 1) * cin * hw],
                            cin,
                            h,
                            wd,
                            kh,
                            kw,
                        );
                    }
                }
                res.push((*x, Tensor::new(tx.shape().to_vec(), gx).unwrap()));
                res.push((*w, Tensor::new(tw.shape().to_vec(), gw).unwrap()));
            }
            Op::AvgPool2 { x } => {
                let s = val(*x).shape().to_vec();
                let (h2, w2) = (s[2] / 2, s[3] / 2);
                let d = Tensor::from_fn(s.clone(), |i| {
                    let p = i / (s[2] * s[3]);
                    let (yy, xx) = ((i % (s[2] * s[3])) / s[3], i % s[3]);
                    0.25 * g.data()[p * h2 * w2 + (yy / 2) * w2 + xx / 2]
                });
                res.push((*x, d));
            }
            Op::Upsample2 { x } => {
                let s = val(*x).shape().to_vec();
                let (h2, w2) = (s[2] * 2, s[3] * 2);
                let mut d = Tensor::zeros(s.clone());
                let dd = d.data_mut();
                for (i, gi) in g.data().iter().enumerate() {
                    let p = i / (h2 * w2);
                    let (yy, xx) = ((i % (h2 * w2)) / w2, i % w2);
                    dd[p * s[2] * s[3] + (yy / 2) * s[3] + xx / 2] += gi;
                }
                res.push((*x, d));
            }
        }
        res
    }
}

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
    Tensor::from_fn(a.shape().to_vec(), |i| f(a.data()[i], b.data()[i]))
}

/// Sum along `axis`, broadcast back over that axis.
fn axis_sum_keep(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut sums = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                sums[o * inner + i] += t.data()[(o * len + j) * inner + i];
            }
        }
    }
    Tensor::from_fn(t.shape().to_vec(), |k| {
        let o = k / (len * inner);
        let i = k % inner;
        sums[o * inner + i]
    })
}

//! Elementwise maps, reductions, softmax, concatenation and affine maps.

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn need<T>(cx: &BackwardCx<'_, T>, i: usize, f: impl FnOnce() -> Vec<T>) -> Option<Vec<T>> {
    cx.needs[i].then(f)
}

struct Add;
impl<T: Scalar> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![need(cx, 0, || grad.to_vec()), need(cx, 1, || grad.to_vec())]
    }
}

struct Sub;
impl<T: Scalar> Backward<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![
            need(cx, 0, || grad.to_vec()),
            need(cx, 1, || grad.iter().map(|&g| -g).collect()),
        ]
    }
}

struct Mul;
impl<T: Scalar> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (cx.inputs[0].data(), cx.inputs[1].data());
        vec![
            need(cx, 0, || grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
            need(cx, 1, || grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
        ]
    }
}

struct Div;
impl<T: Scalar> Backward<T> for Div {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (cx.inputs[0].data(), cx.inputs[1].data());
        vec![
            need(cx, 0, || grad.iter().zip(b).map(|(&g, &y)| g / y).collect()),
            need(cx, 1, || {
                grad.iter()
                    .zip(a.iter().zip(b))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect()
            }),
        ]
    }
}

/// Unary map whose derivative is computed from (input, output).
struct Unary<T> {
    name: &'static str,
    deriv: fn(T, T) -> T,
}
impl<T: Scalar> Backward<T> for Unary<T> {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, y) = (cx.inputs[0].data(), cx.output.data());
        vec![Some(
            grad.iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&x, &y))| g * (self.deriv)(x, y))
                .collect(),
        )]
    }
}

struct Scale<T>(T);
impl<T: Scalar> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.iter().map(|&g| g * self.0).collect())]
    }
}

struct Identity(&'static str);
impl<T: Scalar> Backward<T> for Identity {
    fn name(&self) -> &'static str {
        self.0
    }
    fn backward(&self, _cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Clamp<T> {
    lo: T,
    hi: T,
}
impl<T: Scalar> Backward<T> for Clamp<T> {
    fn name(&self) -> &'static str {
        "clamp"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = cx.inputs[0].data();
        vec![Some(
            grad.iter()
                .zip(x)
                .map(|(&g, &x)| if x < self.lo || x > self.hi { T::zero() } else { g })
                .collect(),
        )]
    }
}

struct SumAll;
impl<T: Scalar> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(vec![grad[0]; cx.inputs[0].numel()])]
    }
}

struct MeanAll;
impl<T: Scalar> Backward<T> for MeanAll {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let n = cx.inputs[0].numel();
        vec![Some(vec![grad[0] / T::lit(n as f64); n])]
    }
}

/// Splits a shape around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct Softmax {
    axis: usize,
}
impl<T: Scalar> Backward<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let y = cx.output.data();
        let (outer, len, inner) = axis_split(cx.output.shape(), self.axis);
        let mut dx = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for a in 0..len {
                    let k = base + a * inner;
                    dot += grad[k] * y[k];
                }
                for a in 0..len {
                    let k = base + a * inner;
                    dx[k] = y[k] * (grad[k] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

struct Concat {
    axis: usize,
}
impl<T: Scalar> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let out_shape = cx.output.shape();
        let (outer, total, inner) = axis_split(out_shape, self.axis);
        let mut offset = 0;
        cx.inputs
            .iter()
            .enumerate()
            .map(|(idx, t)| {
                let len = t.shape()[self.axis];
                let g = cx.needs[idx].then(|| {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        g.extend_from_slice(&grad[start..start + len * inner]);
                    }
                    g
                });
                offset += len;
                g
            })
            .collect()
    }
}

/// Affine map over the last axis: `y[.., o] = sum_i w[o, i] x[.., i] + b[o]`.
struct Linear {
    rows: usize,
    cin: usize,
    cout: usize,
    bias: bool,
}
impl<T: Scalar> Backward<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (cx.inputs[0].data(), cx.inputs[1].data());
        let (r, ci, co) = (self.rows, self.cin, self.cout);
        let dx = need(cx, 0, || {
            let mut dx = vec![T::zero(); r * ci];
            T::gemm(r, co, ci, T::one(), grad, co, 1, w, ci, 1, T::zero(), &mut dx, ci, 1);
            dx
        });
        let dw = need(cx, 1, || {
            let mut dw = vec![T::zero(); co * ci];
            T::gemm(co, r, ci, T::one(), grad, 1, co, x, ci, 1, T::zero(), &mut dw, ci, 1);
            dw
        });
        let mut out = vec![dx, dw];
        if self.bias {
            out.push(need(cx, 2, || {
                let mut db = vec![T::zero(); co];
                for row in grad.chunks_exact(co) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                db
            }));
        }
        out
    }
}

/// Affine map over the leading axis: `y[o, n] = sum_i w[o, i] x[i, n] + b[o]`.
struct ChannelLinear {
    n: usize,
    cin: usize,
    cout: usize,
    bias: bool,
}
impl<T: Scalar> Backward<T> for ChannelLinear {
    fn name(&self) -> &'static str {
        "channel_linear"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (cx.inputs[0].data(), cx.inputs[1].data());
        let (n, ci, co) = (self.n, self.cin, self.cout);
        let dx = need(cx, 0, || {
            let mut dx = vec![T::zero(); ci * n];
            T::gemm(ci, co, n, T::one(), w, 1, ci, grad, n, 1, T::zero(), &mut dx, n, 1);
            dx
        });
        let dw = need(cx, 1, || {
            let mut dw = vec![T::zero(); co * ci];
            T::gemm(co, n, ci, T::one(), grad, n, 1, x, 1, n, T::zero(), &mut dw, ci, 1);
            dw
        });
        let mut out = vec![dx, dw];
        if self.bias {
            out.push(need(cx, 2, || {
                (0..co)
                    .map(|o| grad[o * n..(o + 1) * n].iter().copied().sum())
                    .collect()
            }));
        }
        out
    }
}

/// Softmax-weighted sum of 1-D kernels of different odd lengths, each
/// zero-padded symmetrically to the longest.
struct KernelMixture {
    rows: usize,
    lens: Vec<usize>,
    kmax: usize,
}
impl<T: Scalar> Backward<T> for KernelMixture {
    fn name(&self) -> &'static str {
        "kernel_mixture"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let logits = cx.inputs[0].data();
        let weights = softmax_vec(logits);
        let mut dweights = vec![T::zero(); weights.len()];
        let mut out = vec![None];
        for (j, &k) in self.lens.iter().enumerate() {
            let shift = (self.kmax - k) / 2;
            let kern = cx.inputs[j + 1].data();
            let mut dk = vec![T::zero(); self.rows * k];
            for r in 0..self.rows {
                for t in 0..k {
                    let g = grad[r * self.kmax + t + shift];
                    dk[r * k + t] = g * weights[j];
                    dweights[j] += g * kern[r * k + t];
                }
            }
            out.push(cx.needs[j + 1].then_some(dk));
        }
        let dot: T = dweights.iter().zip(&weights).map(|(&d, &w)| d * w).sum();
        out[0] = cx.needs[0].then(|| {
            weights
                .iter()
                .zip(&dweights)
                .map(|(&w, &d)| w * (d - dot))
                .collect()
        });
        out
    }
}

pub(crate) fn softmax_vec<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
        .expect("same shape")
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(v, vec![a, b], Box::new(Add)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(v, vec![a, b], Box::new(Sub)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(v, vec![a, b], Box::new(Mul)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.record(v, vec![a, b], Box::new(Div)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = map(self.value(a), |x| x * c);
        self.record(v, vec![a], Box::new(Scale(c)))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = map(self.value(a), |x| x + c);
        self.record(v, vec![a], Box::new(Identity("add_scalar")))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| T::one() - x);
        self.record(v, vec![a], Box::new(Scale(-T::one())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| if x > T::zero() { x } else { T::zero() });
        self.record(
            v,
            vec![a],
            Box::new(Unary {
                name: "relu",
                deriv: |x: T, _| if x > T::zero() { T::one() } else { T::zero() },
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), sigmoid);
        self.record(
            v,
            vec![a],
            Box::new(Unary {
                name: "sigmoid",
                deriv: |_, y: T| y * (T::one() - y),
            }),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.exp());
        self.record(v, vec![a], Box::new(Unary { name: "exp", deriv: |_, y| y }))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x.ln());
        self.record(
            v,
            vec![a],
            Box::new(Unary {
                name: "log",
                deriv: |x: T, _| T::one() / x,
            }),
        )
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = map(self.value(a), |x| x.max(lo).min(hi));
        self.record(v, vec![a], Box::new(Clamp { lo, hi }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.record(Tensor::scalar(s), vec![a], Box::new(SumAll))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::lit(t.numel().max(1) as f64);
        self.record(Tensor::scalar(s), vec![a], Box::new(MeanAll))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.record(v, vec![a], Box::new(Identity("reshape"))))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(Error::shape(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, t.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..len {
                    m = m.max(x[base + k * inner]);
                }
                let mut s = T::zero();
                for k in 0..len {
                    let e = (x[base + k * inner] - m).exp();
                    y[base + k * inner] = e;
                    s += e;
                }
                for k in 0..len {
                    y[base + k * inner] /= s;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), y)?;
        Ok(self.record(v, vec![a], Box::new(Softmax { axis })))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {}", s, first, axis),
                ));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.record(v, parts.to_vec(), Box::new(Concat { axis })))
    }

    /// Affine map over the last axis. `weight` is `[cout, cin]`, `bias` `[cout]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let cin = *xs.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::shape(
                "linear",
                format!("input last dim {} vs weight {:?}", cin, ws),
            ));
        }
        let cout = ws[0];
        check_bias(self, "linear", bias, cout)?;
        let rows = xs[..xs.len() - 1].iter().product::<usize>();
        let mut y = vec![T::zero(); rows * cout];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in y.chunks_exact_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(weight).data());
        T::gemm(rows, cin, cout, T::one(), xd, cin, 1, wd, 1, cin, T::one(), &mut y, cout, 1);
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let v = Tensor::new(shape, y)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            v,
            inputs,
            Box::new(Linear {
                rows,
                cin,
                cout,
                bias: bias.is_some(),
            }),
        ))
    }

    /// Affine map over the leading (channel) axis: `[cin, ...] -> [cout, ...]`.
    pub fn channel_linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[1] != xs[0] {
            return Err(Error::shape(
                "channel_linear",
                format!("input {:?} vs weight {:?}", xs, ws),
            ));
        }
        let (cin, cout) = (xs[0], ws[0]);
        check_bias(self, "channel_linear", bias, cout)?;
        let n: usize = xs[1..].iter().product();
        let mut y = vec![T::zero(); cout * n];
        if let Some(b) = bias {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                y[o * n..(o + 1) * n].fill(bv);
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(weight).data());
        T::gemm(cout, cin, n, T::one(), wd, cin, 1, xd, n, 1, T::one(), &mut y, n, 1);
        let mut shape = xs;
        shape[0] = cout;
        let v = Tensor::new(shape, y)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            v,
            inputs,
            Box::new(ChannelLinear {
                n,
                cin,
                cout,
                bias: bias.is_some(),
            }),
        ))
    }

    /// `sum_j softmax(logits)_j * pad(kernel_j)` where each kernel is `[.., k_j]`
    /// with odd `k_j`, centered inside the longest length.
    pub fn kernel_mixture(&mut self, logits: Var, kernels: &[Var]) -> Result<Var> {
        let lv = self.value(logits).data().to_vec();
        if lv.len() != kernels.len() || kernels.is_empty() {
            return Err(Error::shape(
                "kernel_mixture",
                format!("{} logits for {} kernels", lv.len(), kernels.len()),
            ));
        }
        let lead = self.shape(kernels[0])[..self.shape(kernels[0]).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut lens = Vec::new();
        for &k in kernels {
            let s = self.shape(k);
            let len = *s.last().unwrap();
            if s[..s.len() - 1] != lead[..] || len % 2 == 0 {
                return Err(Error::shape(
                    "kernel_mixture",
                    format!("kernel {:?} incompatible with leading dims {:?}", s, lead),
                ));
            }
            lens.push(len);
        }
        let kmax = *lens.iter().max().unwrap();
        let w = softmax_vec(&lv);
        let mut out = vec![T::zero(); rows * kmax];
        for (j, (&k, &kv)) in lens.iter().zip(kernels).enumerate() {
            let shift = (kmax - k) / 2;
            let data = self.value(kv).data();
            for r in 0..rows {
                for t in 0..k {
                    out[r * kmax + t + shift] += w[j] * data[r * k + t];
                }
            }
        }
        let mut shape = lead;
        shape.push(kmax);
        let v = Tensor::new(shape, out)?;
        let mut inputs = vec![logits];
        inputs.extend_from_slice(kernels);
        Ok(self.record(v, inputs, Box::new(KernelMixture { rows, lens, kmax })))
    }
}

fn check_bias<T: Scalar>(
    g: &Graph<T>,
    op: &'static str,
    bias: Option<Var>,
    cout: usize,
) -> Result<()> {
    if let Some(b) = bias {
        if g.shape(b) != [cout] {
            return Err(Error::shape(
                op,
                format!("bias {:?} for {} outputs", g.shape(b), cout),
            ));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

//! Normalization over the channel axis of `[C, ...sites]` tensors.

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct ChannelNorm<T> {
    c: usize,
    n: usize,
    inv_std: Vec<T>,
}

impl<T: Scalar> Backward<T> for ChannelNorm<T> {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (c, n) = (self.c, self.n);
        let y = cx.output.data();
        let inv_c = T::lit(1.0 / c as f64);
        let mut mean_g = vec![T::zero(); n];
        let mut mean_gy = vec![T::zero(); n];
        for ch in 0..c {
            let (gr, yr) = (&grad[ch * n..(ch + 1) * n], &y[ch * n..(ch + 1) * n]);
            for s in 0..n {
                mean_g[s] += gr[s];
                mean_gy[s] += gr[s] * yr[s];
            }
        }
        let mut dx = vec![T::zero(); c * n];
        for ch in 0..c {
            for s in 0..n {
                let k = ch * n + s;
                dx[k] = self.inv_std[s]
                    * (grad[k] - mean_g[s] * inv_c - y[k] * mean_gy[s] * inv_c);
            }
        }
        vec![Some(dx)]
    }
}

struct ChannelAffine {
    c: usize,
    n: usize,
}

impl<T: Scalar> Backward<T> for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (c, n) = (self.c, self.n);
        let (x, gamma) = (cx.inputs[0].data(), cx.inputs[1].data());
        let dx = cx.needs[0].then(|| {
            let mut dx = vec![T::zero(); c * n];
            for ch in 0..c {
                for s in 0..n {
                    dx[ch * n + s] = grad[ch * n + s] * gamma[ch];
                }
            }
            dx
        });
        let dgamma = cx.needs[1].then(|| {
            (0..c)
                .map(|ch| {
                    (0..n)
                        .map(|s| grad[ch * n + s] * x[ch * n + s])
                        .sum::<T>()
                })
                .collect()
        });
        let dbeta = cx.needs[2].then(|| {
            (0..c)
                .map(|ch| grad[ch * n..(ch + 1) * n].iter().copied().sum::<T>())
                .collect()
        });
        vec![dx, dgamma, dbeta]
    }
}

impl<T: Scalar> Graph<T> {
    /// Zero-mean, unit-variance normalization of every site's channel vector.
    pub fn channel_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(Error::shape("channel_norm", format!("shape {:?}", s)));
        }
        let c = s[0];
        let n: usize = s[1..].iter().product();
        let xd = self.value(x).data();
        let inv_c = T::lit(1.0 / c as f64);
        let mut mean = vec![T::zero(); n];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xd[ch * n..(ch + 1) * n]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); n];
        for ch in 0..c {
            for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(&xd[ch * n..(ch + 1) * n]) {
                *v += (x - m) * (x - m);
            }
        }
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v * inv_c + eps).sqrt()).collect();
        let mut y = vec![T::zero(); c * n];
        for ch in 0..c {
            for s in 0..n {
                y[ch * n + s] = (xd[ch * n + s] - mean[s]) * inv_std[s];
            }
        }
        let v = Tensor::new(s, y)?;
        Ok(self.record(v, vec![x], Box::new(ChannelNorm { c, n, inv_std })))
    }

    /// Per-channel scale and shift: `y[c, s] = gamma[c] * x[c, s] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.first().ok_or_else(|| Error::shape("channel_affine", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "channel_affine",
                format!(
                    "{} channels vs gamma {:?} beta {:?}",
                    c,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let n: usize = s[1..].iter().product();
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut y = vec![T::zero(); c * n];
        for ch in 0..c {
            for k in 0..n {
                y[ch * n + k] = xd[ch * n + k] * gd[ch] + bd[ch];
            }
        }
        let v = Tensor::new(s, y)?;
        Ok(self.record(v, vec![x, gamma, beta], Box::new(ChannelAffine { c, n })))
    }
}

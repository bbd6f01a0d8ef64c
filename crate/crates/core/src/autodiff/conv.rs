//! Convolutions as per-tap gather + GEMM.
//!
//! Every convolution here, dense or sparse, is described by a [`TapTable`]:
//! for each kernel tap and each output site, the input site it reads (or
//! nothing, for padding / missing neighbours). The forward pass gathers one
//! `[cin, n_out]` column block per tap and accumulates `W_tap @ cols`.

use std::sync::Arc;

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct TapTable {
    taps: usize,
    n_in: usize,
    n_out: usize,
    index: Vec<u32>,
    identity: Vec<bool>,
    active: Vec<bool>,
}

impl TapTable {
    /// Builds a table from `f(tap, out) -> Some(input site)`.
    pub fn from_fn(
        taps: usize,
        n_in: usize,
        n_out: usize,
        mut f: impl FnMut(usize, usize) -> Option<usize>,
    ) -> Self {
        let mut index = vec![NONE; taps * n_out];
        for t in 0..taps {
            for o in 0..n_out {
                if let Some(i) = f(t, o) {
                    debug_assert!(i < n_in);
                    index[t * n_out + o] = i as u32;
                }
            }
        }
        let identity = (0..taps)
            .map(|t| {
                n_in == n_out && (0..n_out).all(|o| index[t * n_out + o] == o as u32)
            })
            .collect();
        let active = (0..taps)
            .map(|t| index[t * n_out..(t + 1) * n_out].iter().any(|&i| i != NONE))
            .collect();
        Self {
            taps,
            n_in,
            n_out,
            index,
            identity,
            active,
        }
    }

    /// Dense grid convolution over up to three spatial axes.
    pub fn dense(
        in_dims: [usize; 3],
        kernel: [usize; 3],
        opts: Conv3dOpts,
    ) -> Result<(Self, [usize; 3])> {
        let mut out_dims = [0usize; 3];
        for a in 0..3 {
            let span = opts.dilation[a] * (kernel[a] - 1) + 1;
            let padded = in_dims[a] + 2 * opts.padding[a];
            if kernel[a] == 0 || opts.stride[a] == 0 || padded < span {
                return Err(Error::shape(
                    "conv",
                    format!(
                        "axis {}: input {} with padding {} smaller than kernel extent {}",
                        a, in_dims[a], opts.padding[a], span
                    ),
                ));
            }
            out_dims[a] = (padded - span) / opts.stride[a] + 1;
        }
        let taps = kernel.iter().product();
        let n_in = in_dims.iter().product();
        let n_out = out_dims.iter().product();
        let table = Self::from_fn(taps, n_in, n_out, |t, o| {
            let k = [t / (kernel[1] * kernel[2]), (t / kernel[2]) % kernel[1], t % kernel[2]];
            let oc = [
                o / (out_dims[1] * out_dims[2]),
                (o / out_dims[2]) % out_dims[1],
                o % out_dims[2],
            ];
            let mut flat = 0usize;
            for a in 0..3 {
                let pos = (oc[a] * opts.stride[a] + k[a] * opts.dilation[a]) as isize
                    - opts.padding[a] as isize;
                if pos < 0 || pos >= in_dims[a] as isize {
                    return None;
                }
                flat = flat * in_dims[a] + pos as usize;
            }
            Some(flat)
        });
        Ok((table, out_dims))
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn get(&self, tap: usize, out: usize) -> Option<usize> {
        let i = self.index[tap * self.n_out + out];
        (i != NONE).then_some(i as usize)
    }

    fn gather<T: Scalar>(&self, tap: usize, input: &[T], cin: usize, cols: &mut [T]) {
        let idx = &self.index[tap * self.n_out..(tap + 1) * self.n_out];
        for c in 0..cin {
            let src = &input[c * self.n_in..(c + 1) * self.n_in];
            let dst = &mut cols[c * self.n_out..(c + 1) * self.n_out];
            for (d, &i) in dst.iter_mut().zip(idx) {
                *d = if i == NONE { T::zero() } else { src[i as usize] };
            }
        }
    }

    fn scatter_add<T: Scalar>(&self, tap: usize, cols: &[T], cin: usize, out: &mut [T]) {
        let idx = &self.index[tap * self.n_out..(tap + 1) * self.n_out];
        for c in 0..cin {
            let dst = &mut out[c * self.n_in..(c + 1) * self.n_in];
            let src = &cols[c * self.n_out..(c + 1) * self.n_out];
            for (&v, &i) in src.iter().zip(idx) {
                if i != NONE {
                    dst[i as usize] += v;
                }
            }
        }
    }
}

/// Stride, zero padding and dilation per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dOpts {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
}

impl Default for Conv3dOpts {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            padding: [0; 3],
            dilation: [1; 3],
        }
    }
}

impl Conv3dOpts {
    /// Same-size output for an odd cubic kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: [1; 3],
            padding: [dilation * (kernel - 1) / 2; 3],
            dilation: [dilation; 3],
        }
    }

    pub fn strided(stride: usize, padding: usize) -> Self {
        Self {
            stride: [stride; 3],
            padding: [padding; 3],
            dilation: [1; 3],
        }
    }
}

struct TapConv {
    table: Arc<TapTable>,
    batch: usize,
    cin: usize,
    cout: usize,
    bias: bool,
}

impl<T: Scalar> Backward<T> for TapConv {
    fn name(&self) -> &'static str {
        "tap_conv"
    }

    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let tb = &*self.table;
        let (x, w) = (cx.inputs[0].data(), cx.inputs[1].data());
        let (cin, cout, taps) = (self.cin, self.cout, tb.taps);
        let (n_in, n_out) = (tb.n_in, tb.n_out);
        let mut dx = cx.needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = cx.needs[1].then(|| vec![T::zero(); w.len()]);
        let mut cols = vec![T::zero(); cin * n_out];
        for b in 0..self.batch {
            let xb = &x[b * cin * n_in..(b + 1) * cin * n_in];
            let gb = &grad[b * cout * n_out..(b + 1) * cout * n_out];
            for t in 0..taps {
                if !tb.active[t] {
                    continue;
                }
                if let Some(dw) = dw.as_mut() {
                    let src: &[T] = if tb.identity[t] {
                        xb
                    } else {
                        tb.gather(t, xb, cin, &mut cols);
                        &cols
                    };
                    // dW_t[o, i] += sum_n g[o, n] * col[i, n]
                    T::gemm(
                        cout,
                        n_out,
                        cin,
                        T::one(),
                        gb,
                        n_out,
                        1,
                        src,
                        1,
                        n_out,
                        T::one(),
                        &mut dw[t..],
                        cin * taps,
                        taps,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[b * cin * n_in..(b + 1) * cin * n_in];
                    // dcol[i, n] = sum_o W_t[o, i] g[o, n]
                    if tb.identity[t] {
                        T::gemm(
                            cin,
                            cout,
                            n_out,
                            T::one(),
                            &w[t..],
                            taps,
                            cin * taps,
                            gb,
                            n_out,
                            1,
                            T::one(),
                            dxb,
                            n_in,
                            1,
                        );
                    } else {
                        T::gemm(
                            cin,
                            cout,
                            n_out,
                            T::one(),
                            &w[t..],
                            taps,
                            cin * taps,
                            gb,
                            n_out,
                            1,
                            T::zero(),
                            &mut cols,
                            n_out,
                            1,
                        );
                        tb.scatter_add(t, &cols, cin, dxb);
                    }
                }
            }
        }
        let mut out = vec![dx, dw];
        if self.bias {
            out.push(cx.needs[2].then(|| {
                let mut db = vec![T::zero(); cout];
                for b in 0..self.batch {
                    for (o, d) in db.iter_mut().enumerate() {
                        let start = (b * cout + o) * n_out;
                        *d += grad[start..start + n_out].iter().copied().sum::<T>();
                    }
                }
                db
            }));
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    /// Generic convolution driven by a tap table.
    ///
    /// `x` holds `batch * cin * table.n_in()` values laid out `[batch, cin, sites]`;
    /// `weight` is `[cout, cin, taps...]`. The output has shape `out_shape`,
    /// which must hold `batch * cout * table.n_out()` values.
    pub fn tap_conv(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        table: Arc<TapTable>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() < 2 || ws[2..].iter().product::<usize>() != table.taps {
            return Err(Error::shape(
                "conv",
                format!("weight {:?} does not match {} taps", ws, table.taps),
            ));
        }
        let (cout, cin) = (ws[0], ws[1]);
        let xn = self.value(x).numel();
        let per_batch = cin * table.n_in;
        if per_batch == 0 && xn != 0 || per_batch != 0 && xn % per_batch != 0 {
            return Err(Error::shape(
                "conv",
                format!(
                    "input {:?} is not a multiple of {} channels x {} sites",
                    self.shape(x),
                    cin,
                    table.n_in
                ),
            ));
        }
        let batch = if per_batch == 0 {
            out_shape.iter().product::<usize>() / (cout * table.n_out).max(1)
        } else {
            xn / per_batch
        };
        if out_shape.iter().product::<usize>() != batch * cout * table.n_out {
            return Err(Error::shape(
                "conv",
                format!("output shape {:?} inconsistent with batch {}", out_shape, batch),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(
                    "conv",
                    format!("bias {:?} for {} output channels", self.shape(b), cout),
                ));
            }
        }
        let (n_in, n_out, taps) = (table.n_in, table.n_out, table.taps);
        let mut y = vec![T::zero(); batch * cout * n_out];
        {
            let xd = self.value(x).data();
            let wd = self.value(weight).data();
            let bd = bias.map(|b| self.value(b).data());
            let mut cols = vec![T::zero(); cin * n_out];
            for b in 0..batch {
                let xb = &xd[b * cin * n_in..(b + 1) * cin * n_in];
                let yb = &mut y[b * cout * n_out..(b + 1) * cout * n_out];
                if let Some(bd) = bd {
                    for (o, &bv) in bd.iter().enumerate() {
                        yb[o * n_out..(o + 1) * n_out].fill(bv);
                    }
                }
                for t in 0..taps {
                    if !table.active[t] {
                        continue;
                    }
                    let src: &[T] = if table.identity[t] {
                        xb
                    } else {
                        table.gather(t, xb, cin, &mut cols);
                        &cols
                    };
                    T::gemm(
                        cout,
                        cin,
                        n_out,
                        T::one(),
                        &wd[t..],
                        cin * taps,
                        taps,
                        src,
                        n_out,
                        1,
                        T::one(),
                        yb,
                        n_out,
                        1,
                    );
                }
            }
        }
        let v = Tensor::new(out_shape, y)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            v,
            inputs,
            Box::new(TapConv {
                table,
                batch,
                cin,
                cout,
                bias: bias.is_some(),
            }),
        ))
    }

    /// 2-D cross-correlation over `[B, C, H, W]` with weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with weight {:?}", xs, ws),
            ));
        }
        let opts = Conv3dOpts {
            stride: [stride, stride, 1],
            padding: [padding, padding, 0],
            dilation: [1; 3],
        };
        let (table, out) = TapTable::dense([xs[2], xs[3], 1], [ws[2], ws[3], 1], opts)?;
        self.tap_conv(
            x,
            weight,
            bias,
            Arc::new(table),
            vec![xs[0], ws[0], out[0], out[1]],
        )
    }

    /// 3-D cross-correlation over `[.., C, X, Y, Z]` with weight `[Cout, Cin, kx, ky, kz]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        opts: Conv3dOpts,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() < 4 || ws.len() != 5 || ws[1] != xs[xs.len() - 4] {
            return Err(Error::shape(
                "conv3d",
                format!("input {:?} with weight {:?}", xs, ws),
            ));
        }
        let sp = [xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]];
        let (table, out) = TapTable::dense(sp, [ws[2], ws[3], ws[4]], opts)?;
        let mut shape = xs[..xs.len() - 4].to_vec();
        shape.extend([ws[0], out[0], out[1], out[2]]);
        self.tap_conv(x, weight, bias, Arc::new(table), shape)
    }

    /// 1-D convolution along one spatial axis (0 = x, 1 = y, 2 = z) of a
    /// `[.., C, X, Y, Z]` volume with weight `[Cout, Cin, k]`; `k` must be odd and
    /// the padding keeps spatial dims unchanged.
    pub fn conv1d_axis(&mut self, x: Var, weight: Var, bias: Option<Var>, axis: usize) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        if ws.len() != 3 || axis > 2 {
            return Err(Error::shape(
                "conv1d_axis",
                format!("weight {:?} / axis {}", ws, axis),
            ));
        }
        let k = ws[2];
        if k % 2 == 0 {
            return Err(Error::invalid(format!("conv1d_axis: kernel size {} is even", k)));
        }
        let mut kernel = [1; 3];
        kernel[axis] = k;
        let mut opts = Conv3dOpts::default();
        opts.padding[axis] = (k - 1) / 2;
        let xs = self.shape(x).to_vec();
        if xs.len() < 4 || ws[1] != xs[xs.len() - 4] {
            return Err(Error::shape(
                "conv1d_axis",
                format!("input {:?} with weight {:?}", xs, ws),
            ));
        }
        let sp = [xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]];
        let (table, out) = TapTable::dense(sp, kernel, opts)?;
        let mut shape = xs[..xs.len() - 4].to_vec();
        shape.extend([ws[0], out[0], out[1], out[2]]);
        self.tap_conv(x, weight, bias, Arc::new(table), shape)
    }
}

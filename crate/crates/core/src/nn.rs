//! Parameterised layers. Each layer holds only [`ParamId`]s, so one
//! definition serves any scalar type; forward passes read the weights from a
//! [`ParamStore`] onto the graph.

use std::sync::Arc;

use crate::autodiff::{Conv3dOpts, Graph, TapTable, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub const NORM_EPS: f64 = 1e-5;

/// Affine map over the leading channel axis.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Dense {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let w = store.kaiming(&format!("{name}.w"), &[cout, cin], cin)?;
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), &[cout])?)
        } else {
            None
        };
        Ok(Self { w, b, cin, cout })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.channel_linear(x, w, b)
    }
}

/// Stack of [`Dense`] layers with relu between them (not after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(format!("mlp {name}: needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Dense::new(store, &format!("{name}.{i}"), d[0], d[1], true))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn cin(&self) -> usize {
        self.layers[0].cin
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, store, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Per-site normalization over channels followed by a per-channel affine.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.ones(&format!("{name}.gamma"), &[c])?,
            beta: store.zeros(&format!("{name}.beta"), &[c])?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.channel_norm(x, NORM_EPS)?;
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.channel_affine(n, gamma, beta)
    }

    /// `relu(norm(x))` over a `[C, ...]` value whose leading dims may include a batch of 1.
    pub fn relu<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.relu(y))
    }
}

/// Dense 3D convolution on `[C, X, Y, Z]` volumes.
#[derive(Debug, Clone)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub opts: Conv3dOpts,
}

impl Conv3 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        opts: Conv3dOpts,
        bias: bool,
    ) -> Result<Self> {
        let w = store.kaiming(
            &format!("{name}.w"),
            &[cout, cin, kernel, kernel, kernel],
            cin * kernel.pow(3),
        )?;
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), &[cout])?)
        } else {
            None
        };
        Ok(Self { w, b, opts })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv3d(x, w, b, self.opts)
    }
}

/// Convolution over an arbitrary [`TapTable`], used for sparse voxel sets.
#[derive(Debug, Clone)]
pub struct TapConv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cout: usize,
}

impl TapConv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, taps: usize, bias: bool) -> Result<Self> {
        let w = store.kaiming(&format!("{name}.w"), &[cout, cin, taps], cin * taps)?;
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), &[cout])?)
        } else {
            None
        };
        Ok(Self { w, b, cout })
    }

    /// `x` is `[cin, table.n_in()]`; the result is `[cout, table.n_out()]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, table: &Arc<TapTable>) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.tap_conv(x, w, b, table.clone(), vec![self.cout, table.n_out()])
    }
}

/// 2D convolution on `[B, C, H, W]` images.
#[derive(Debug, Clone)]
pub struct Conv2 {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2 {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            w: store.kaiming(&format!("{name}.w"), &[cout, cin, kernel, kernel], cin * kernel * kernel)?,
            b: store.zeros(&format!("{name}.b"), &[cout])?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Index of the parent cell for every cell of a grid upsampled by 2.
pub fn upsample2_index(dims: [usize; 3]) -> Arc<Vec<usize>> {
    Arc::new(crate::voxel::upsample_index(dims, 2))
}

/// Nearest-neighbour 2x upsampling of a `[C, X, Y, Z]` value.
pub fn upsample2<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape("upsample2", format!("{:?}", s)));
    }
    let dims = [s[1], s[2], s[3]];
    let cols = g.gather_cols(x, upsample2_index(dims))?;
    g.reshape(cols, vec![s[0], dims[0] * 2, dims[1] * 2, dims[2] * 2])
}

//! Voxel aggregation and multi-scale semantic diffusion.

use std::sync::Arc;

use crate::autodiff::{Conv3dOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3, Dense, Mlp, Norm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Kernel lengths mixed along each axis.
pub const MIXER_KERNELS: [usize; 3] = [3, 5, 7];
/// Dilation rates of the pyramid branches.
pub const ASPP_RATES: [usize; 3] = [1, 2, 3];

#[derive(Debug, Clone)]
struct AxisMixer {
    logits: ParamId,
    kernels: Vec<ParamId>,
}

/// Anisotropic convolution: per-axis soft mixtures of 1D kernels applied
/// along x, then y, then z, added to the input, then normalized.
#[derive(Debug, Clone)]
pub struct Aic {
    pub channels: usize,
    axes: Vec<AxisMixer>,
    norm: Option<Norm>,
}

impl Aic {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, norm: bool) -> Result<Self> {
        let axes = ["x", "y", "z"]
            .iter()
            .map(|ax| {
                let logits = store.zeros(&format!("{name}.{ax}.mix"), &[MIXER_KERNELS.len()])?;
                let kernels = MIXER_KERNELS
                    .iter()
                    .map(|&k| {
                        store.normal(
                            &format!("{name}.{ax}.k{k}"),
                            &[c, c, k],
                            (1.0 / (c * k) as f64).sqrt(),
                        )
                    })
                    .collect::<Result<_>>()?;
                Ok(AxisMixer { logits, kernels })
            })
            .collect::<Result<_>>()?;
        let norm = if norm {
            Some(Norm::new(store, &format!("{name}.norm"), c)?)
        } else {
            None
        };
        Ok(Self {
            channels: c,
            axes,
            norm,
        })
    }

    /// Mixed `[C, C, 7]` kernel for axis `a` (0 = x, 1 = y, 2 = z).
    pub fn mixed_kernel<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, a: usize) -> Result<Var> {
        let m = &self.axes[a];
        let logits = g.param(store, m.logits);
        let kernels: Vec<Var> = m.kernels.iter().map(|&k| g.param(store, k)).collect();
        g.kernel_mixture(logits, &kernels)
    }

    /// Parameters of the axis mixers: `(mixer logits, [k3, k5, k7])` per axis.
    pub fn mixer_params(&self) -> Vec<(ParamId, Vec<ParamId>)> {
        self.axes
            .iter()
            .map(|m| (m.logits, m.kernels.clone()))
            .collect()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for a in 0..3 {
            let k = self.mixed_kernel(g, store, a)?;
            h = g.conv1d_axis(h, k, None, a)?;
        }
        let y = g.add(x, h)?;
        match &self.norm {
            Some(n) => n.relu(g, store, y),
            None => Ok(y),
        }
    }
}

/// Dilated 3x3x3 branches at [`ASPP_RATES`], concatenated, fused by a 1x1 map
/// and added back to the input.
#[derive(Debug, Clone)]
pub struct Aspp {
    branches: Vec<Conv3>,
    fuse: Dense,
}

impl Aspp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let width = (c / 2).max(1);
        let branches = ASPP_RATES
            .iter()
            .map(|&d| {
                Conv3::new(
                    store,
                    &format!("{name}.d{d}"),
                    c,
                    width,
                    3,
                    Conv3dOpts::same(3, d),
                    true,
                )
            })
            .collect::<Result<_>>()?;
        let fuse = Dense::new(store, &format!("{name}.fuse"), width * ASPP_RATES.len(), c, true)?;
        Ok(Self { branches, fuse })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let y = b.forward(g, store, x)?;
            outs.push(g.relu(y));
        }
        let cat = g.concat(&outs, 0)?;
        let f = self.fuse.forward(g, store, cat)?;
        let y = g.add(x, f)?;
        Ok(g.relu(y))
    }
}

/// `D` anisotropic layers, a dilated pyramid and a per-voxel class head.
#[derive(Debug, Clone)]
pub struct Mssd {
    pub channels: usize,
    pub classes: usize,
    aics: Vec<Aic>,
    aspp: Aspp,
    head: Dense,
}

/// Class logits and their per-voxel softmax, both `[classes, X, Y, Z]`.
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub logits: Var,
    pub probs: Var,
}

impl Mssd {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, layers: usize, classes: usize) -> Result<Self> {
        let aics = (0..layers)
            .map(|i| Aic::new(store, &format!("{name}.aic{i}"), c, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            channels: c,
            classes,
            aics,
            aspp: Aspp::new(store, &format!("{name}.aspp"), c)?,
            head: Dense::new(store, &format!("{name}.head"), c, classes, true)?,
        })
    }

    pub fn layers(&self) -> usize {
        self.aics.len()
    }

    /// Chebyshev radius (in voxels) of the dependence of one output voxel on the input.
    pub fn receptive_radius(&self) -> usize {
        self.aics.len() * (MIXER_KERNELS.iter().max().unwrap() / 2) + ASPP_RATES.iter().max().unwrap()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Prediction> {
        if g.shape(x).len() != 4 || g.shape(x)[0] != self.channels {
            return Err(Error::shape(
                "mssd",
                format!("input {:?} for {} channels", g.shape(x), self.channels),
            ));
        }
        let mut h = x;
        for a in &self.aics {
            h = a.forward(g, store, h)?;
        }
        h = self.aspp.forward(g, store, h)?;
        let logits = self.head.forward(g, store, h)?;
        let probs = g.softmax(logits, 0)?;
        Ok(Prediction { logits, probs })
    }
}

/// Split of a grid into seed and non-seed voxels (linear indices, ascending).
#[derive(Debug, Clone)]
pub struct SeedSplit {
    pub seeds: Arc<Vec<usize>>,
    pub rest: Arc<Vec<usize>>,
    pub dims: [usize; 3],
}

impl SeedSplit {
    /// `seeds` must be strictly ascending and in bounds.
    pub fn new(seeds: Vec<usize>, dims: [usize; 3]) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut written = vec![0u8; n];
        for (i, &s) in seeds.iter().enumerate() {
            if s >= n {
                return Err(Error::OutOfBounds {
                    op: "seed_split",
                    index: i,
                    detail: format!("voxel {s} of {n}"),
                });
            }
            written[s] += 1;
            if written[s] > 1 {
                return Err(Error::invalid(format!("seed voxel {s} listed twice")));
            }
        }
        let rest = (0..n).filter(|&i| written[i] == 0).collect();
        Ok(Self {
            seeds: Arc::new(seeds),
            rest: Arc::new(rest),
            dims,
        })
    }

    pub fn coords(&self) -> Vec<[usize; 3]> {
        let [_, y, z] = self.dims;
        self.seeds
            .iter()
            .map(|&i| [i / (y * z), (i / z) % y, i % z])
            .collect()
    }
}

/// Knowledge transfer for non-seed voxels and the fusing MLP.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub channels: usize,
    pub occ_channels: usize,
    kt: Dense,
    mlp: Mlp,
}

impl Aggregation {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, c_o: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            occ_channels: c_o,
            kt: Dense::new(store, &format!("{name}.kt"), c, c, true)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[c + c_o, c + c_o, c + c_o])?,
        })
    }

    /// One `[C, X, Y, Z]` grid holding `f_s` at the seeds and the transferred
    /// lifted features everywhere else.
    pub fn combine<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f_s: Var, split: &SeedSplit, f3d: Var) -> Result<Var> {
        let c = self.channels;
        let [x, y, z] = split.dims;
        let shape = vec![c, x, y, z];
        if g.shape(f3d) != shape.as_slice() || g.shape(f_s) != [c, split.seeds.len()] {
            return Err(Error::shape(
                "voxel_aggregate",
                format!(
                    "lifted {:?}, seeds {:?} for {} seeds in {:?}",
                    g.shape(f3d),
                    g.shape(f_s),
                    split.seeds.len(),
                    split.dims
                ),
            ));
        }
        let f_n = g.gather_cols(f3d, split.rest.clone())?;
        let kt = self.kt.forward(g, store, f_n)?;
        let a = g.scatter_cols(f_s, split.seeds.clone(), shape.clone())?;
        let b = g.scatter_cols(kt, split.rest.clone(), shape)?;
        g.add(a, b)
    }

    /// `MLP([combine(..), F_o])`, shape `[C + C_o, X, Y, Z]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_s: Var,
        split: &SeedSplit,
        f3d: Var,
        f_o: Var,
    ) -> Result<Var> {
        let cn = self.combine(g, store, f_s, split, f3d)?;
        let cat = g.concat(&[cn, f_o], 0)?;
        self.mlp.forward(g, store, cat)
    }
}

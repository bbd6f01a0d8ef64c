//! Coarse occupancy from depth points, dense refinement and seed selection.

use crate::autodiff::{Conv3dOpts, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{upsample2, Conv3, Dense, Norm, TapConv};
use crate::params::ParamStore;
use crate::sparse::{Seb, SparseLevels};
use crate::tensor::{Scalar, Tensor};
use crate::voxel::{voxelize_mean, SceneSpec, SparseVoxelSet};

/// Channels of [`point_features`]: centroid offset (3), height, log count.
pub const POINT_FEATURES: usize = 5;

/// Voxelizes points into per-cell features: the mean offset of the points
/// from the cell centroid in voxel units, the mean height normalized to the
/// grid's vertical extent, and `ln(1 + count)`.
pub fn point_features<T: Scalar>(points: &[[f64; 3]], spec: &SceneSpec) -> Result<SparseVoxelSet<T>> {
    let s = spec.voxel_size;
    let height = spec.dims[2] as f64 * s;
    let mut feats = Vec::with_capacity(points.len() * 4);
    for &p in points {
        match spec.world_to_voxel(p) {
            Some(c) => {
                let m = spec.centroid(c);
                feats.extend([
                    (p[0] - m[0]) / s,
                    (p[1] - m[1]) / s,
                    (p[2] - m[2]) / s,
                    (p[2] - spec.origin[2]) / height,
                ]);
            }
            None => feats.extend([0.0; 4]),
        }
    }
    let mut set = voxelize_mean::<T>(points, &feats, 4, spec)?;
    let n = set.len();
    for v in &mut set.feats.data_mut()[4 * n..] {
        *v = T::lit((1.0 + v.as_f64()).ln());
    }
    Ok(set)
}

/// Sparse point encoder producing per-cell occupancy logits and features.
#[derive(Debug, Clone)]
pub struct CoarseStage {
    pub channels: usize,
    proj: TapConv,
    proj_norm: Norm,
    seb: Seb,
    head: Dense,
}

/// Per-cell outputs of [`CoarseStage`]: logits `[1, N]`, features `[C, N]`.
#[derive(Debug, Clone, Copy)]
pub struct CoarseOutput {
    pub logits: Var,
    pub feats: Var,
}

impl CoarseStage {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            proj: TapConv::new(store, &format!("{name}.proj"), POINT_FEATURES, c, 27, false)?,
            proj_norm: Norm::new(store, &format!("{name}.proj.norm"), c)?,
            seb: Seb::new(store, &format!("{name}.seb"), c)?,
            head: Dense::new(store, &format!("{name}.head"), c, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, levels: &SparseLevels) -> Result<CoarseOutput> {
        let h = self.proj.forward(g, store, x, &levels.subm)?;
        let h = self.proj_norm.relu(g, store, h)?;
        let feats = self.seb.forward(g, store, h, levels)?;
        let logits = self.head.forward(g, store, feats)?;
        Ok(CoarseOutput { logits, feats })
    }

    /// Channels of [`CoarseStage::densify`].
    pub fn dense_channels(&self) -> usize {
        self.channels + 2
    }

    /// Dense `[C + 2, X, Y, Z]` grid holding `[logit, feats, 1]` at occupied
    /// cells and zeros elsewhere.
    pub fn densify<T: Scalar>(&self, g: &mut Graph<T>, out: &CoarseOutput, coords: &[[usize; 3]], dims: [usize; 3]) -> Result<Var> {
        let ones = g.constant(Tensor::ones([1, coords.len()]));
        let cat = g.concat(&[out.logits, out.feats, ones], 0)?;
        g.scatter_voxels(cat, coords, dims)
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv3,
    norm: Norm,
}

impl Block {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, opts: Conv3dOpts) -> Result<Self> {
        Ok(Self {
            conv: Conv3::new(store, name, cin, cout, 3, opts, true)?,
            norm: Norm::new(store, &format!("{name}.norm"), cout)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        self.norm.relu(g, store, y)
    }
}

/// Three-level 3D U-Net with a 1x1 occupancy head.
#[derive(Debug, Clone)]
pub struct UNet {
    pub in_channels: usize,
    pub out_channels: usize,
    enc: [Block; 3],
    dec1: Block,
    dec0: Block,
    head: Dense,
}

/// Occupancy logits `[1, X, Y, Z]`, their sigmoid and the decoder features `[C_o, X, Y, Z]`.
#[derive(Debug, Clone, Copy)]
pub struct Occupancy {
    pub logits: Var,
    pub probs: Var,
    pub feats: Var,
}

impl UNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, widths: [usize; 3], c_o: usize) -> Result<Self> {
        let [w0, w1, w2] = widths;
        let down = Conv3dOpts::strided(2, 1);
        Ok(Self {
            in_channels: cin,
            out_channels: c_o,
            enc: [
                Block::new(store, &format!("{name}.enc0"), cin, w0, Conv3dOpts::same(3, 1))?,
                Block::new(store, &format!("{name}.enc1"), w0, w1, down)?,
                Block::new(store, &format!("{name}.enc2"), w1, w2, down)?,
            ],
            dec1: Block::new(store, &format!("{name}.dec1"), w2 + w1, w1, Conv3dOpts::same(3, 1))?,
            dec0: Block::new(store, &format!("{name}.dec0"), w1 + w0, c_o, Conv3dOpts::same(3, 1))?,
            head: Dense::new(store, &format!("{name}.head"), c_o, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Occupancy> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[0] != self.in_channels || s[1..].iter().any(|d| d % 4 != 0 || *d == 0) {
            return Err(Error::shape(
                "unet",
                format!("input {:?}: needs {} channels and spatial dims divisible by 4", s, self.in_channels),
            ));
        }
        let e0 = self.enc[0].forward(g, store, x)?;
        let e1 = self.enc[1].forward(g, store, e0)?;
        let e2 = self.enc[2].forward(g, store, e1)?;
        let u1 = upsample2(g, e2)?;
        let d1 = g.concat(&[u1, e1], 0)?;
        let d1 = self.dec1.forward(g, store, d1)?;
        let u0 = upsample2(g, d1)?;
        let d0 = g.concat(&[u0, e0], 0)?;
        let feats = self.dec0.forward(g, store, d0)?;
        let logits = self.head.forward(g, store, feats)?;
        let probs = g.sigmoid(logits);
        Ok(Occupancy { logits, probs, feats })
    }
}

/// Linear indices of voxels with occupancy strictly above `theta`, ascending.
pub fn select_seeds<T: Scalar>(occupancy: &[T], theta: f64) -> Vec<usize> {
    occupancy
        .iter()
        .enumerate()
        .filter(|(_, &o)| o.as_f64() > theta)
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::sparse::SparseCoords;
    use proptest::prelude::*;

    #[test]
    fn point_features_by_hand() {
        let spec = SceneSpec::new([0.0, 0.0, 0.0], 1.0, [2, 2, 2]).unwrap();
        let pts = [[0.25, 0.5, 0.5], [0.75, 0.5, 1.0 - 1e-9], [1.5, 1.5, 1.5]];
        let set = point_features::<f64>(&pts, &spec).unwrap();
        assert_eq!(set.coords, vec![[0, 0, 0], [1, 1, 1]]);
        let f = set.feats.data();
        // channel-major, two cells
        assert!((f[0] - 0.0).abs() < 1e-9);
        assert!((f[4] - 0.25).abs() < 1e-6);
        assert!((f[6] - 0.375).abs() < 1e-6);
        assert!((f[7] - 0.75).abs() < 1e-12);
        assert!((f[8] - 3f64.ln()).abs() < 1e-12);
        assert!((f[9] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unet_zero_input_gives_half() {
        let mut store = ParamStore::<f64>::new(3);
        let net = UNet::new(&mut store, "u", 4, [4, 6, 8], 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([4, 8, 4, 4]));
        let o = net.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(o.probs), &[1, 8, 4, 4]);
        assert_eq!(g.shape(o.feats), &[3, 8, 4, 4]);
        assert!(g.value(o.probs).data().iter().all(|&p| p == 0.5));
        let bad = g.input(Tensor::zeros([4, 6, 4, 4]));
        assert!(net.forward(&mut g, &store, bad).is_err());
    }

    #[test]
    fn densify_places_logit_features_and_indicator() {
        let mut store = ParamStore::<f64>::new(5);
        let stage = CoarseStage::new(&mut store, "c", 4).unwrap();
        let dims = [4, 4, 2];
        let coords = vec![[0, 1, 0], [2, 3, 1], [3, 0, 0]];
        let levels = SparseLevels::new(SparseCoords::new(coords.clone(), dims).unwrap());
        let mut r = rng::stream(1, "t");
        let mut g = Graph::new();
        let x = g.input(
            Tensor::new([POINT_FEATURES, 3], (0..15).map(|_| rng::normal(&mut r)).collect()).unwrap(),
        );
        let out = stage.forward(&mut g, &store, x, &levels).unwrap();
        let dense = stage.densify(&mut g, &out, &coords, dims).unwrap();
        assert_eq!(g.shape(dense), &[6, 4, 4, 2]);
        let back = g.gather_voxels(dense, &coords).unwrap();
        let v = g.value(back).data();
        for j in 0..3 {
            assert_eq!(v[j], g.value(out.logits).data()[j]);
            assert_eq!(v[5 * 3 + j], 1.0);
        }
        let total: f64 = g.value(dense).data().iter().map(|v| v.abs()).sum();
        let at: f64 = v.iter().map(|v| v.abs()).sum();
        assert!((total - at).abs() < 1e-9);
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(select_seeds(&[0.5f64, 0.51, 0.2, 0.9], 0.5), vec![1, 3]);
    }

    proptest! {
        #[test]
        fn seeds_are_nested(occ in proptest::collection::vec(0.0f64..1.0, 0..64), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s_hi = select_seeds(&occ, hi);
            let s_lo = select_seeds(&occ, lo);
            prop_assert!(s_hi.iter().all(|i| s_lo.contains(i)));
            prop_assert!(s_lo.iter().all(|&i| occ[i] > lo));
        }
    }
}

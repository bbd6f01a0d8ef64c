//! Auxiliary guidance: a dense geometry head and sparse semantic refinement of
//! seed features.

use crate::autodiff::{Graph, Var};
use crate::diffusion::Aic;
use crate::error::{Error, Result};
use crate::nn::{Dense, Mlp};
use crate::params::ParamStore;
use crate::sparse::{Seb, SparseLevels};
use crate::tensor::Scalar;
use crate::voxel::VoxelGrid;

/// Occupancy logits `[1, X, Y, Z]` from lifted features.
#[derive(Debug, Clone)]
pub struct GeometryHead {
    aic: Aic,
    linear: Dense,
}

impl GeometryHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            aic: Aic::new(store, &format!("{name}.aic"), c, true)?,
            linear: Dense::new(store, &format!("{name}.linear"), c, 1, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f3d: Var) -> Result<Var> {
        let h = self.aic.forward(g, store, f3d)?;
        self.linear.forward(g, store, h)
    }
}

/// Two sparse encoder blocks over the seed set, an MLP fusing all three
/// feature stages, and a semantic head used for supervision.
#[derive(Debug, Clone)]
pub struct SemanticGuidance {
    pub channels: usize,
    seb: [Seb; 2],
    fusion: Mlp,
    head: Mlp,
}

/// Refined seed features `[C, N_s]` and, when requested, class logits `[classes, N_s]`.
#[derive(Debug, Clone, Copy)]
pub struct SeedOutput {
    pub feats: Var,
    pub logits: Option<Var>,
}

impl SemanticGuidance {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, classes: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            seb: [
                Seb::new(store, &format!("{name}.seb1"), c)?,
                Seb::new(store, &format!("{name}.seb2"), c)?,
            ],
            fusion: Mlp::new(store, &format!("{name}.fusion"), &[3 * c, 2 * c, c])?,
            head: Mlp::new(store, &format!("{name}.head"), &[c, c, classes])?,
        })
    }

    /// `f0` is `[C, N_s]` over `levels.fine`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f0: Var,
        levels: &SparseLevels,
        with_head: bool,
    ) -> Result<SeedOutput> {
        let f1 = self.seb[0].forward(g, store, f0, levels)?;
        let f2 = self.seb[1].forward(g, store, f1, levels)?;
        let cat = g.concat(&[f0, f1, f2], 0)?;
        let feats = self.fusion.forward(g, store, cat)?;
        let logits = if with_head {
            Some(self.head.forward(g, store, feats)?)
        } else {
            None
        };
        Ok(SeedOutput { feats, logits })
    }
}

/// Ground-truth labels at seed voxels (linear indices into `labels`).
pub fn seed_labels(labels: &VoxelGrid<u8>, seeds: &[usize]) -> Result<Vec<u8>> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            labels.values.get(s).copied().ok_or_else(|| Error::OutOfBounds {
                op: "seed_labels",
                index: i,
                detail: format!("voxel {s} of {}", labels.values.len()),
            })
        })
        .collect()
}

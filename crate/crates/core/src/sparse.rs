//! Sparse voxel convolution on hashed coordinates and the sparse encoder block.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::autodiff::{Graph, TapTable, Var};
use crate::error::{Error, Result};
use crate::nn::{Dense, Norm, TapConv};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Unique in-bounds voxel coordinates with a position lookup.
#[derive(Debug, Clone)]
pub struct SparseCoords {
    coords: Vec<[usize; 3]>,
    dims: [usize; 3],
    lookup: HashMap<[usize; 3], usize>,
}

impl SparseCoords {
    pub fn new(coords: Vec<[usize; 3]>, dims: [usize; 3]) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if (0..3).any(|a| c[a] >= dims[a]) {
                return Err(Error::OutOfBounds {
                    op: "sparse_coords",
                    index: i,
                    detail: format!("{:?} outside {:?}", c, dims),
                });
            }
            if lookup.insert(*c, i).is_some() {
                return Err(Error::invalid(format!("duplicate sparse coordinate {:?}", c)));
            }
        }
        Ok(Self {
            coords,
            dims,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn find(&self, c: [isize; 3]) -> Option<usize> {
        if (0..3).any(|a| c[a] < 0 || c[a] as usize >= self.dims[a]) {
            return None;
        }
        self.lookup.get(&c.map(|v| v as usize)).copied()
    }

    /// Submanifold table for an odd cubic kernel: output sites are the input
    /// sites, and tap `(i, j, k)` reads the neighbour at offset `(i, j, k) - k/2`.
    pub fn subm_table(&self, kernel: usize) -> TapTable {
        assert!(kernel % 2 == 1, "submanifold kernel must be odd");
        let r = (kernel / 2) as isize;
        let n = self.len();
        TapTable::from_fn(kernel.pow(3), n, n, |t, o| {
            let off = [
                (t / (kernel * kernel)) as isize - r,
                ((t / kernel) % kernel) as isize - r,
                (t % kernel) as isize - r,
            ];
            let c = self.coords[o];
            self.find([0, 1, 2].map(|a| c[a] as isize + off[a]))
        })
    }

    /// Stride-2 coarsening. Returns the coarse set (ascending linear order),
    /// the 2x2x2 strided-conv table from this level to it, and each site's
    /// coarse parent.
    pub fn downsample(&self) -> (SparseCoords, TapTable, Vec<usize>) {
        let cdims = self.dims.map(|d| d.div_ceil(2));
        let mut order: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
        for c in &self.coords {
            let p = c.map(|v| v / 2);
            order.insert((p[0] * cdims[1] + p[1]) * cdims[2] + p[2], p);
        }
        let coarse = SparseCoords::new(order.into_values().collect(), cdims)
            .expect("coarse coordinates are unique and in bounds");
        let table = TapTable::from_fn(8, self.len(), coarse.len(), |t, o| {
            let p = coarse.coords[o];
            let f = [2 * p[0] + (t >> 2), 2 * p[1] + ((t >> 1) & 1), 2 * p[2] + (t & 1)];
            self.find(f.map(|v| v as isize))
        });
        let parent = self
            .coords
            .iter()
            .map(|c| coarse.lookup[&c.map(|v| v / 2)])
            .collect();
        (coarse, table, parent)
    }
}

/// Everything a sparse encoder block needs to run on one coordinate set.
#[derive(Debug, Clone)]
pub struct SparseLevels {
    pub fine: SparseCoords,
    pub subm: Arc<TapTable>,
    pub coarse: SparseCoords,
    pub down: Arc<TapTable>,
    pub coarse_subm: Arc<TapTable>,
    pub parent: Arc<Vec<usize>>,
}

impl SparseLevels {
    pub fn new(fine: SparseCoords) -> Self {
        let subm = Arc::new(fine.subm_table(3));
        let (coarse, down, parent) = fine.downsample();
        let coarse_subm = Arc::new(coarse.subm_table(3));
        Self {
            fine,
            subm,
            coarse,
            down: Arc::new(down),
            coarse_subm,
            parent: Arc::new(parent),
        }
    }

    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }
}

/// Sparse encoder block: a submanifold feature encoder and a strided
/// geometry encoder, fused by a 1x1 map and added back to the input.
#[derive(Debug, Clone)]
pub struct Seb {
    pub channels: usize,
    feat: [(TapConv, Norm); 2],
    down: (TapConv, Norm),
    geo: (TapConv, Norm),
    fuse: Dense,
}

impl Seb {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let layer = |store: &mut ParamStore<T>, tag: &str, taps: usize| -> Result<(TapConv, Norm)> {
            Ok((
                TapConv::new(store, &format!("{name}.{tag}"), c, c, taps, false)?,
                Norm::new(store, &format!("{name}.{tag}.norm"), c)?,
            ))
        };
        Ok(Self {
            channels: c,
            feat: [layer(store, "feat0", 27)?, layer(store, "feat1", 27)?],
            down: layer(store, "down", 8)?,
            geo: layer(store, "geo", 27)?,
            fuse: Dense::new(store, &format!("{name}.fuse"), 2 * c, c, true)?,
        })
    }

    /// `x` is `[C, N]` over `levels.fine`; the result has the same shape and sites.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, levels: &SparseLevels) -> Result<Var> {
        if g.shape(x) != [self.channels, levels.len()] {
            return Err(Error::shape(
                "seb",
                format!(
                    "input {:?} for {} channels at {} sites",
                    g.shape(x),
                    self.channels,
                    levels.len()
                ),
            ));
        }
        let mut f = x;
        for (conv, norm) in &self.feat {
            f = conv.forward(g, store, f, &levels.subm)?;
            f = norm.relu(g, store, f)?;
        }
        let h = self.down.0.forward(g, store, x, &levels.down)?;
        let h = self.down.1.relu(g, store, h)?;
        let h = self.geo.0.forward(g, store, h, &levels.coarse_subm)?;
        let h = self.geo.1.relu(g, store, h)?;
        let up = g.gather_cols(h, levels.parent.clone())?;
        let cat = g.concat(&[f, up], 0)?;
        let fused = self.fuse.forward(g, store, cat)?;
        let sum = g.add(x, fused)?;
        Ok(g.relu(sum))
    }
}

//! Column gather/scatter and sparse weighted sampling.

use std::sync::Arc;

use super::{Backward, BackwardCx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct GatherCols {
    idx: Arc<Vec<usize>>,
    sites: usize,
}

impl<T: Scalar> Backward<T> for GatherCols {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let c = cx.inputs[0].numel() / self.sites.max(1);
        vec![Some(scatter_add(grad, &self.idx, c, self.sites))]
    }
}

struct ScatterCols {
    idx: Arc<Vec<usize>>,
}

impl<T: Scalar> Backward<T> for ScatterCols {
    fn name(&self) -> &'static str {
        "scatter"
    }
    fn backward(&self, cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let m = self.idx.len();
        let c = cx.inputs[0].numel() / m.max(1);
        let sites = if c == 0 { 0 } else { grad.len() / c };
        vec![Some(gather(grad, &self.idx, c, sites))]
    }
}

fn gather<T: Scalar>(src: &[T], idx: &[usize], c: usize, sites: usize) -> Vec<T> {
    let m = idx.len();
    let mut out = vec![T::zero(); c * m];
    for ch in 0..c {
        let row = &src[ch * sites..(ch + 1) * sites];
        for (o, &i) in out[ch * m..(ch + 1) * m].iter_mut().zip(idx) {
            *o = row[i];
        }
    }
    out
}

fn scatter_add<T: Scalar>(cols: &[T], idx: &[usize], c: usize, sites: usize) -> Vec<T> {
    let m = idx.len();
    let mut out = vec![T::zero(); c * sites];
    for ch in 0..c {
        let row = &mut out[ch * sites..(ch + 1) * sites];
        for (&v, &i) in cols[ch * m..(ch + 1) * m].iter().zip(idx) {
            row[i] += v;
        }
    }
    out
}

/// Sparse linear resampling: output site `p` is a weighted sum of input
/// sites drawn from any of `groups` source blocks.
///
/// With input `[groups, C, sites]` the output is `[C, n_out]` where
/// `out[c, p] = sum_(g, s, w) in entries(p) w * in[g, c, s]`.
#[derive(Debug, Clone, Default)]
pub struct SampleMap {
    pub groups: usize,
    pub sites: usize,
    pub n_out: usize,
    offsets: Vec<usize>,
    entries: Vec<(u32, u32, f64)>,
}

impl SampleMap {
    pub fn new(groups: usize, sites: usize) -> Self {
        Self {
            groups,
            sites,
            n_out: 0,
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends the next output site.
    pub fn push_site(&mut self, entries: impl IntoIterator<Item = (usize, usize, f64)>) {
        for (g, s, w) in entries {
            debug_assert!(g < self.groups && s < self.sites);
            self.entries.push((g as u32, s as u32, w));
        }
        self.offsets.push(self.entries.len());
        self.n_out += 1;
    }

    pub fn entries(&self, site: usize) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries[self.offsets[site]..self.offsets[site + 1]]
            .iter()
            .map(|&(g, s, w)| (g as usize, s as usize, w))
    }

    pub fn apply<T: Scalar>(&self, input: &[T], channels: usize) -> Vec<T> {
        let n = self.n_out;
        let mut out = vec![T::zero(); channels * n];
        for p in 0..n {
            for (g, s, w) in self.entries(p) {
                let w = T::lit(w);
                for c in 0..channels {
                    out[c * n + p] += w * input[(g * channels + c) * self.sites + s];
                }
            }
        }
        out
    }

    fn apply_transpose<T: Scalar>(&self, grad: &[T], channels: usize) -> Vec<T> {
        let n = self.n_out;
        let mut out = vec![T::zero(); self.groups * channels * self.sites];
        for p in 0..n {
            for (g, s, w) in self.entries(p) {
                let w = T::lit(w);
                for c in 0..channels {
                    out[(g * channels + c) * self.sites + s] += w * grad[c * n + p];
                }
            }
        }
        out
    }
}

struct WeightedSample {
    map: Arc<SampleMap>,
    channels: usize,
}

impl<T: Scalar> Backward<T> for WeightedSample {
    fn name(&self) -> &'static str {
        "weighted_sample"
    }
    fn backward(&self, _cx: &BackwardCx<'_, T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(self.map.apply_transpose(grad, self.channels))]
    }
}

impl<T: Scalar> Graph<T> {
    /// Selects columns of `a` viewed as `[C, sites]`; returns `[C, idx.len()]`.
    pub fn gather_cols(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather", "scalar input"));
        }
        let c = s[0];
        let sites: usize = s[1..].iter().product();
        if let Some((pos, &bad)) = idx.iter().enumerate().find(|(_, &i)| i >= sites) {
            return Err(Error::OutOfBounds {
                op: "gather",
                index: pos,
                detail: format!("site {} >= {} sites", bad, sites),
            });
        }
        let data = gather(self.value(a).data(), &idx, c, sites);
        let v = Tensor::new([c, idx.len()], data)?;
        Ok(self.record(v, vec![a], Box::new(GatherCols { idx, sites })))
    }

    /// Adjoint of [`Graph::gather_cols`]: writes the columns of `[C, M]` into
    /// `[C, sites]`, summing duplicates; the result is reshaped to `out_shape`.
    pub fn scatter_cols(
        &mut self,
        a: Var,
        idx: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != idx.len() || out_shape.first() != Some(&s[0]) {
            return Err(Error::shape(
                "scatter",
                format!("{:?} with {} indices into {:?}", s, idx.len(), out_shape),
            ));
        }
        let sites: usize = out_shape[1..].iter().product();
        if let Some((pos, &bad)) = idx.iter().enumerate().find(|(_, &i)| i >= sites) {
            return Err(Error::OutOfBounds {
                op: "scatter",
                index: pos,
                detail: format!("site {} >= {} sites", bad, sites),
            });
        }
        let data = scatter_add(self.value(a).data(), &idx, s[0], sites);
        let v = Tensor::new(out_shape, data)?;
        Ok(self.record(v, vec![a], Box::new(ScatterCols { idx })))
    }

    /// Channel vectors of a `[C, X, Y, Z]` grid at integer coordinates.
    pub fn gather_voxels(&mut self, grid: Var, coords: &[[usize; 3]]) -> Result<Var> {
        let dims = grid_dims(self.shape(grid), "gather_voxels")?;
        let idx = linear_indices(coords, dims, "gather_voxels")?;
        self.gather_cols(grid, Arc::new(idx))
    }

    /// Adjoint of [`Graph::gather_voxels`]; duplicate coordinates are summed.
    pub fn scatter_voxels(&mut self, cols: Var, coords: &[[usize; 3]], dims: [usize; 3]) -> Result<Var> {
        let idx = linear_indices(coords, dims, "scatter_voxels")?;
        let c = self.shape(cols).first().copied().unwrap_or(0);
        self.scatter_cols(cols, Arc::new(idx), vec![c, dims[0], dims[1], dims[2]])
    }

    /// Applies a [`SampleMap`] to a `[groups, C, ...sites]` input.
    pub fn weighted_sample(&mut self, input: Var, map: Arc<SampleMap>) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() < 2 || s[0] != map.groups || s[2..].iter().product::<usize>() != map.sites {
            return Err(Error::shape(
                "weighted_sample",
                format!(
                    "input {:?} vs {} groups of {} sites",
                    s, map.groups, map.sites
                ),
            ));
        }
        let channels = s[1];
        let data = map.apply(self.value(input).data(), channels);
        let v = Tensor::new([channels, map.n_out], data)?;
        Ok(self.record(v, vec![input], Box::new(WeightedSample { map, channels })))
    }
}

fn grid_dims(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    if shape.len() != 4 {
        return Err(Error::shape(op, format!("expected [C, X, Y, Z], got {:?}", shape)));
    }
    Ok([shape[1], shape[2], shape[3]])
}

fn linear_indices(coords: &[[usize; 3]], dims: [usize; 3], op: &'static str) -> Result<Vec<usize>> {
    coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if c[0] >= dims[0] || c[1] >= dims[1] || c[2] >= dims[2] {
                Err(Error::OutOfBounds {
                    op,
                    index: i,
                    detail: format!("coordinate {:?} outside grid {:?}", c, dims),
                })
            } else {
                Ok((c[0] * dims[1] + c[1]) * dims[2] + c[2])
            }
        })
        .collect()
}

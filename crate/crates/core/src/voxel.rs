//! Scene extents, dense voxel grids, sparse voxel sets and resolution changes.
//!
//! Grids use an x-major layout: the linear index of `(x, y, z)` is
//! `(x * Y + y) * Z + z`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from every loss and metric.
pub const INVALID: u8 = 255;

/// Axis-aligned voxel grid placement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    /// World position of the grid's minimum corner, metres.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl SceneSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(Error::invalid(format!("voxel size must be > 0, got {voxel_size}")));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Working grid used at desk scale: 32 x 32 x 8 voxels of 0.8 m over
    /// `[0, 25.6] x [-12.8, 12.8] x [-2, 4.4]`.
    pub fn desk() -> Self {
        Self {
            origin: [0.0, -12.8, -2.0],
            voxel_size: 0.8,
            dims: [32, 32, 8],
        }
    }

    /// Full-size working grid: 128 x 128 x 16 voxels of 0.4 m (output at 0.2 m).
    pub fn full() -> Self {
        Self {
            origin: [0.0, -25.6, -2.0],
            voxel_size: 0.4,
            dims: [128, 128, 16],
        }
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn coord(&self, index: usize) -> [usize; 3] {
        let [_, y, z] = self.dims;
        [index / (y * z), (index / z) % y, index % z]
    }

    /// World position of a voxel centre.
    pub fn centroid(&self, c: [usize; 3]) -> [f64; 3] {
        let s = self.voxel_size;
        [
            self.origin[0] + (c[0] as f64 + 0.5) * s,
            self.origin[1] + (c[1] as f64 + 0.5) * s,
            self.origin[2] + (c[2] as f64 + 0.5) * s,
        ]
    }

    /// Centres of all voxels in layout order.
    pub fn centroids(&self) -> Vec<[f64; 3]> {
        (0..self.n_voxels()).map(|i| self.centroid(self.coord(i))).collect()
    }

    /// Voxel containing a world point, by `floor((p - origin) / s)`.
    pub fn world_to_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            c[a] = f as usize;
        }
        Some(c)
    }

    /// Upper corner of the scene box.
    pub fn max_corner(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < hi[a])
    }

    /// Same extents at `factor` times the resolution.
    pub fn upsampled(&self, factor: usize) -> Self {
        Self {
            origin: self.origin,
            voxel_size: self.voxel_size / factor as f64,
            dims: self.dims.map(|d| d * factor),
        }
    }

    pub fn downsampled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::invalid(format!(
                "grid dims {:?} not divisible by {}",
                self.dims, factor
            )));
        }
        Ok(Self {
            origin: self.origin,
            voxel_size: self.voxel_size * factor as f64,
            dims: self.dims.map(|d| d / factor),
        })
    }
}

/// Dense per-voxel storage.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<V> {
    pub spec: SceneSpec,
    pub values: Vec<V>,
}

impl<V: Clone> VoxelGrid<V> {
    pub fn filled(spec: SceneSpec, value: V) -> Self {
        Self {
            values: vec![value; spec.n_voxels()],
            spec,
        }
    }

    pub fn from_values(spec: SceneSpec, values: Vec<V>) -> Result<Self> {
        if values.len() != spec.n_voxels() {
            return Err(Error::shape(
                "voxel_grid",
                format!("{} values for dims {:?}", values.len(), spec.dims),
            ));
        }
        Ok(Self { spec, values })
    }

    pub fn get(&self, c: [usize; 3]) -> &V {
        &self.values[self.spec.index(c)]
    }

    pub fn set(&mut self, c: [usize; 3], v: V) {
        let i = self.spec.index(c);
        self.values[i] = v;
    }
}

/// Seed or input voxels: unique in-bounds coordinates with channel-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelSet<T> {
    pub coords: Vec<[usize; 3]>,
    /// `[C, N]`
    pub feats: Tensor<T>,
}

impl<T: Scalar> SparseVoxelSet<T> {
    pub fn new(spec: &SceneSpec, coords: Vec<[usize; 3]>, feats: Tensor<T>) -> Result<Self> {
        if feats.ndim() != 2 || feats.shape()[1] != coords.len() {
            return Err(Error::shape(
                "sparse_voxel_set",
                format!("features {:?} for {} coordinates", feats.shape(), coords.len()),
            ));
        }
        let mut seen = std::collections::HashSet::with_capacity(coords.len());
        for (i, c) in coords.iter().enumerate() {
            if (0..3).any(|a| c[a] >= spec.dims[a]) {
                return Err(Error::OutOfBounds {
                    op: "sparse_voxel_set",
                    index: i,
                    detail: format!("{:?} outside {:?}", c, spec.dims),
                });
            }
            if !seen.insert(*c) {
                return Err(Error::invalid(format!("duplicate coordinate {:?}", c)));
            }
        }
        Ok(Self { coords, feats })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Binary occupancy: cells containing at least one point are 1.
/// Points outside the grid are dropped.
pub fn voxelize_occupancy(points: &[[f64; 3]], spec: &SceneSpec) -> VoxelGrid<u8> {
    let mut grid = VoxelGrid::filled(*spec, 0u8);
    for p in points {
        if let Some(c) = spec.world_to_voxel(*p) {
            grid.set(c, 1);
        }
    }
    grid
}

/// Per-cell mean of point features, plus a trailing point-count channel.
/// `feats` holds `n_feat` values per point. Output coordinates are sorted by
/// linear index.
pub fn voxelize_mean<T: Scalar>(
    points: &[[f64; 3]],
    feats: &[f64],
    n_feat: usize,
    spec: &SceneSpec,
) -> Result<SparseVoxelSet<T>> {
    if feats.len() != points.len() * n_feat {
        return Err(Error::shape(
            "voxelize",
            format!("{} feature values for {} points x {}", feats.len(), points.len(), n_feat),
        ));
    }
    let mut cells: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (p, f) in points.iter().zip(feats.chunks_exact(n_feat.max(1))) {
        if let Some(c) = spec.world_to_voxel(*p) {
            let e = cells
                .entry(spec.index(c))
                .or_insert_with(|| (vec![0.0; n_feat], 0));
            for (acc, &v) in e.0.iter_mut().zip(f) {
                *acc += v;
            }
            e.1 += 1;
        }
    }
    let n = cells.len();
    let ch = n_feat + 1;
    let mut data = vec![T::zero(); ch * n];
    let mut coords = Vec::with_capacity(n);
    for (j, (&idx, (sum, count))) in cells.iter().enumerate() {
        coords.push(spec.coord(idx));
        for k in 0..n_feat {
            data[k * n + j] = T::lit(sum[k] / *count as f64);
        }
        data[n_feat * n + j] = T::lit(*count as f64);
    }
    SparseVoxelSet::new(spec, coords, Tensor::new([ch, n], data)?)
}

/// Majority vote over `factor^3` blocks. Invalid voxels do not vote; an
/// all-invalid block stays invalid. Ties go to the smallest non-empty class,
/// and empty (class 0) only wins when it is the sole top class.
pub fn downsample_labels(labels: &VoxelGrid<u8>, factor: usize) -> Result<VoxelGrid<u8>> {
    let coarse = labels.spec.downsampled(factor)?;
    let mut out = VoxelGrid::filled(coarse, INVALID);
    let mut counts = [0u32; 256];
    for i in 0..coarse.n_voxels() {
        let c = coarse.coord(i);
        counts.fill(0);
        for dx in 0..factor {
            for dy in 0..factor {
                for dz in 0..factor {
                    let f = [c[0] * factor + dx, c[1] * factor + dy, c[2] * factor + dz];
                    counts[*labels.get(f) as usize] += 1;
                }
            }
        }
        counts[INVALID as usize] = 0;
        let best = counts.iter().copied().max().unwrap_or(0);
        if best == 0 {
            continue;
        }
        let winner = (1..255)
            .find(|&k| counts[k] == best)
            .unwrap_or(0) as u8;
        out.values[i] = winner;
    }
    Ok(out)
}

/// Nearest-neighbour replication of a `[C, X, Y, Z]` channel-major array into
/// `[C, fX, fY, fZ]`.
pub fn upsample_nearest<V: Copy>(values: &[V], channels: usize, dims: [usize; 3], factor: usize) -> Vec<V> {
    let n: usize = dims.iter().product();
    assert_eq!(values.len(), channels * n, "upsample: value count");
    let fine = dims.map(|d| d * factor);
    let idx = upsample_index(dims, factor);
    let nf: usize = fine.iter().product();
    let mut out = Vec::with_capacity(channels * nf);
    for c in 0..channels {
        let row = &values[c * n..(c + 1) * n];
        out.extend(idx.iter().map(|&i| row[i]));
    }
    out
}

/// For each fine voxel (in fine layout order), the index of its coarse parent.
pub fn upsample_index(dims: [usize; 3], factor: usize) -> Vec<usize> {
    let fine = dims.map(|d| d * factor);
    let mut idx = Vec::with_capacity(fine.iter().product());
    for x in 0..fine[0] {
        for y in 0..fine[1] {
            for z in 0..fine[2] {
                idx.push(((x / factor) * dims[1] + y / factor) * dims[2] + z / factor);
            }
        }
    }
    idx
}

/// Class distributions `[C, X, Y, Z]` replicated into 2x2x2 (or `factor^3`) blocks.
pub fn upsample_predictions<T: Scalar>(pred: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = pred.shape();
    if s.len() != 4 {
        return Err(Error::shape("upsample_predictions", format!("{:?}", s)));
    }
    let dims = [s[1], s[2], s[3]];
    let data = upsample_nearest(pred.data(), s[0], dims, factor);
    Tensor::new([s[0], dims[0] * factor, dims[1] * factor, dims[2] * factor], data)
}

/// Per-voxel argmax over the channel axis of `[C, N]`.
pub fn argmax_channels<T: Scalar>(probs: &[T], channels: usize) -> Vec<u8> {
    let n = if channels == 0 { 0 } else { probs.len() / channels };
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..channels {
                if probs[c * n + i] > probs[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

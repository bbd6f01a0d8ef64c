//! Procedural street scenes: solids, label rasterization, ray-cast depth and
//! observation masks.

use rand::Rng;

use crate::camera::{pixel_center, CameraModel};
use crate::error::{Error, Result};
use crate::rng;
use crate::voxel::{SceneSpec, VoxelGrid, INVALID};

pub const EMPTY: u8 = 0;
pub const ROAD: u8 = 1;
pub const BUILDING: u8 = 2;
pub const CAR: u8 = 3;
pub const VEGETATION: u8 = 4;
pub const POLE: u8 = 5;
pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["empty", "road", "building", "car", "vegetation", "pole"];

/// Overlap resolution: lower rank wins.
pub fn priority(class: u8) -> u8 {
    match class {
        POLE => 0,
        CAR => 1,
        BUILDING => 2,
        VEGETATION => 3,
        ROAD => 4,
        _ => 5,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Solid {
    /// Half-open box `[min, max)`.
    Box { min: [f64; 3], max: [f64; 3], class: u8 },
    /// Vertical cylinder over `z in [z0, z1)`.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z0: f64,
        z1: f64,
        class: u8,
    },
}

impl Solid {
    pub fn class(&self) -> u8 {
        match *self {
            Solid::Box { class, .. } | Solid::Cylinder { class, .. } => class,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Solid::Box { min, max, .. } => (0..3).all(|a| p[a] >= min[a] && p[a] < max[a]),
            Solid::Cylinder {
                center, radius, z0, z1, ..
            } => {
                let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
                p[2] >= z0 && p[2] < z1 && dx * dx + dy * dy < radius * radius
            }
        }
    }

    /// Smallest `t > 0` where `o + t d` enters the solid.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Solid::Box { min, max, .. } => slab(o, d, min, max).and_then(|(t0, _)| (t0 > 0.0).then_some(t0)),
            Solid::Cylinder {
                center, radius, z0, z1, ..
            } => {
                let mut best = f64::INFINITY;
                let (ox, oy) = (o[0] - center[0], o[1] - center[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 0.0 {
                    let b = ox * d[0] + oy * d[1];
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let z = o[2] + t * d[2];
                        if t > 0.0 && z >= z0 && z <= z1 {
                            best = t;
                        }
                    }
                }
                if d[2] != 0.0 {
                    for zc in [z0, z1] {
                        let t = (zc - o[2]) / d[2];
                        let (x, y) = (ox + t * d[0], oy + t * d[1]);
                        if t > 0.0 && x * x + y * y <= radius * radius && t < best {
                            best = t;
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }
}

/// Entry and exit parameters of a ray through an axis-aligned box.
fn slab(o: [f64; 3], d: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a] == 0.0 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
        } else {
            let (mut ta, mut tb) = ((min[a] - o[a]) / d[a], (max[a] - o[a]) / d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// A scene: an optional ground half-space `z < ground` of class [`ROAD`] plus solids.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub seed: u64,
    pub ground: Option<f64>,
    pub solids: Vec<Solid>,
}

impl SceneDescription {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            ground: None,
            solids: Vec::new(),
        }
    }

    /// Class at a point by the priority rule, or [`EMPTY`].
    pub fn class_at(&self, p: [f64; 3]) -> u8 {
        let mut best = EMPTY;
        for s in &self.solids {
            if s.contains(p) && priority(s.class()) < priority(best) {
                best = s.class();
            }
        }
        if best == EMPTY && self.ground.is_some_and(|h| p[2] < h) {
            best = ROAD;
        }
        best
    }

    /// Nearest hit along `o + t d` (`t > 0`) and its class.
    pub fn ray_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, u8)> {
        let mut best: Option<(f64, u8)> = None;
        let mut consider = |t: f64, c: u8| {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, c));
            }
        };
        if let Some(h) = self.ground {
            if d[2] < 0.0 && o[2] > h {
                consider((h - o[2]) / d[2], ROAD);
            }
        }
        for s in &self.solids {
            if let Some(t) = s.intersect(o, d) {
                consider(t, s.class());
            }
        }
        best
    }
}

/// Scene generation knobs. Object counts scale with `difficulty`; 0 gives
/// the ground alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub difficulty: u32,
    /// Probability that an unobserved voxel is marked [`INVALID`].
    pub invalid_prob: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            difficulty: 1,
            invalid_prob: 1.0,
        }
    }
}

/// Generates a scene on `spec`, whose cells are the snapping unit: every
/// object spans whole cells and stands on a one-cell-thick ground. Objects are
/// kept inside a 45 degree wedge in front of the origin along +x.
pub fn generate_scene(seed: u64, spec: &SceneSpec, params: &SynthParams) -> SceneDescription {
    let s = spec.voxel_size;
    let [nx, ny, nz] = spec.dims;
    let ground = spec.origin[2] + s;
    let mut desc = SceneDescription {
        seed,
        ground: Some(ground),
        solids: Vec::new(),
    };
    if params.difficulty == 0 {
        return desc;
    }
    let mut r = rng::stream(seed, "scene");
    let mut used = vec![false; nx * ny];
    let cell_x = |i: usize| spec.origin[0] + i as f64 * s;
    let cell_y = |j: usize| spec.origin[1] + j as f64 * s;
    let zmax = nz.saturating_sub(1).max(1);

    // (class, count range, footprint x range, footprint y range, height range) in cells
    type Kind = (u8, (u32, u32), (usize, usize), (usize, usize), (usize, usize));
    let kinds: [Kind; 4] = [
        (BUILDING, (1, 2), (4, 8), (4, 8), (4, 6)),
        (CAR, (1, 3), (4, 4), (2, 2), (2, 2)),
        (VEGETATION, (1, 2), (1, 1), (4, 8), (1, 1)),
        (POLE, (1, 3), (1, 1), (1, 1), (4, 5)),
    ];
    for (class, (cmin, cmax), wx, wy, hz) in kinds {
        let count = r.random_range(cmin..=cmax) * params.difficulty;
        let mut placed = 0;
        for _ in 0..200 {
            if placed == count {
                break;
            }
            let (mut w, mut l) = (r.random_range(wx.0..=wx.1), r.random_range(wy.0..=wy.1));
            if r.random::<bool>() && class == VEGETATION {
                std::mem::swap(&mut w, &mut l);
            }
            let h = r.random_range(hz.0..=hz.1).min(zmax);
            if w + 4 > nx || l + 2 > ny {
                continue;
            }
            let i0 = r.random_range(3..=nx - w - 1);
            let j0 = r.random_range(1..=ny - l - 1);
            let (x0, x1) = (cell_x(i0), cell_x(i0 + w));
            let (y0, y1) = (cell_y(j0), cell_y(j0 + l));
            // stay within the forward wedge |y| < x
            if y0.abs().max(y1.abs()) > x0 {
                continue;
            }
            // one free cell of clearance around every footprint
            let free = (i0 - 1..=i0 + w).all(|i| (j0 - 1..=j0 + l).all(|j| !used[i * ny + j]));
            if !free {
                continue;
            }
            for i in i0..i0 + w {
                for j in j0..j0 + l {
                    used[i * ny + j] = true;
                }
            }
            let (z0, z1) = (ground, ground + h as f64 * s);
            desc.solids.push(if class == POLE {
                Solid::Cylinder {
                    center: [(x0 + x1) / 2.0, (y0 + y1) / 2.0],
                    radius: 0.4375 * s,
                    z0,
                    z1,
                    class,
                }
            } else {
                Solid::Box {
                    min: [x0, y0, z0],
                    max: [x1, y1, z1],
                    class,
                }
            });
            placed += 1;
        }
    }
    desc
}

/// Class of every voxel centroid.
pub fn rasterize_labels(desc: &SceneDescription, spec: &SceneSpec) -> VoxelGrid<u8> {
    let values = spec.centroids().into_iter().map(|p| desc.class_at(p)).collect();
    VoxelGrid::from_values(*spec, values).expect("one value per voxel")
}

/// World-frame ray through pixel `(u, v)` scaled so that its parameter is camera depth.
fn depth_ray(cam: &CameraModel, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    let o = cam.center();
    let p = cam.back_project_pixel(u, v, 1.0);
    (o, [p[0] - o[0], p[1] - o[1], p[2] - o[2]])
}

/// Camera-z depth of the first surface through every pixel centre, row-major;
/// 0 where nothing is hit.
pub fn render_depth_f64(desc: &SceneDescription, cam: &CameraModel) -> Vec<f64> {
    let mut out = vec![0.0; cam.width * cam.height];
    for row in 0..cam.height {
        for col in 0..cam.width {
            let (u, v) = pixel_center(col, row);
            let (o, d) = depth_ray(cam, u, v);
            if let Some((t, _)) = desc.ray_hit(o, d) {
                out[row * cam.width + col] = t;
            }
        }
    }
    out
}

pub fn render_depth(desc: &SceneDescription, cam: &CameraModel) -> Vec<f32> {
    render_depth_f64(desc, cam).into_iter().map(|d| d as f32).collect()
}

/// Voxels crossed by some pixel ray before (or at) its first surface hit.
pub fn observed_mask(desc: &SceneDescription, cams: &[CameraModel], spec: &SceneSpec) -> Vec<bool> {
    let mut seen = vec![false; spec.n_voxels()];
    let (lo, hi) = (spec.origin, spec.max_corner());
    for cam in cams {
        for row in 0..cam.height {
            for col in 0..cam.width {
                let (u, v) = pixel_center(col, row);
                let (o, d) = depth_ray(cam, u, v);
                let t_hit = desc.ray_hit(o, d).map_or(f64::INFINITY, |(t, _)| t);
                let Some((t0, t1)) = slab(o, d, lo, hi) else {
                    continue;
                };
                let t_end = t1.min(t_hit + 1e-9);
                let t_start = t0.max(0.0);
                if t_start > t_end {
                    continue;
                }
                traverse(spec, o, d, t_start, t_end, |i| seen[i] = true);
            }
        }
    }
    seen
}

/// Grid traversal of the segment `t in [t_start, t_end]`, visiting each
/// crossed voxel once in ray order.
fn traverse(spec: &SceneSpec, o: [f64; 3], d: [f64; 3], t_start: f64, t_end: f64, mut visit: impl FnMut(usize)) {
    let s = spec.voxel_size;
    let p = [0, 1, 2].map(|a| o[a] + t_start * d[a]);
    let mut c = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let f = ((p[a] - spec.origin[a]) / s).floor() as i64;
        c[a] = f.clamp(0, spec.dims[a] as i64 - 1);
        if d[a] > 0.0 {
            step[a] = 1;
            let next = spec.origin[a] + (c[a] + 1) as f64 * s;
            t_max[a] = (next - o[a]) / d[a];
            t_delta[a] = s / d[a];
        } else if d[a] < 0.0 {
            step[a] = -1;
            let next = spec.origin[a] + c[a] as f64 * s;
            t_max[a] = (next - o[a]) / d[a];
            t_delta[a] = -s / d[a];
        }
    }
    loop {
        visit(spec.index(c.map(|v| v as usize)));
        let a = (0..3)
            .min_by(|&i, &j| t_max[i].total_cmp(&t_max[j]))
            .unwrap();
        if t_max[a] > t_end {
            return;
        }
        c[a] += step[a];
        if c[a] < 0 || c[a] >= spec.dims[a] as i64 {
            return;
        }
        t_max[a] += t_delta[a];
    }
}

/// Rendering and layout settings for [`synth_sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Working grid; labels are produced at twice its resolution.
    pub spec: SceneSpec,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Backward shift along -x between consecutive frames, metres.
    pub frame_spacing: f64,
    pub params: SynthParams,
}

impl SynthConfig {
    pub fn desk() -> Self {
        Self {
            spec: SceneSpec::desk(),
            frames: 1,
            width: 512,
            height: 192,
            focal: 256.0,
            frame_spacing: 0.5,
            params: SynthParams::default(),
        }
    }

    /// Full-size grid with a KITTI-sized image.
    pub fn full() -> Self {
        Self {
            spec: SceneSpec::full(),
            width: 1226,
            height: 370,
            focal: 707.0,
            ..Self::desk()
        }
    }

    /// `desk`, `full`, or `key=value` text applied on top of `desk`. Keys:
    /// `preset`, `origin`, `voxel_size`, `dims` (working grid), `frames`,
    /// `width`, `height`, `focal`, `frame_spacing`, `difficulty`, `invalid_prob`.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "desk" => return Ok(Self::desk()),
            "full" => return Ok(Self::full()),
            _ => {}
        }
        let kv = crate::dataset::parse_key_values(text)?;
        let mut c = match kv.get("preset").map(String::as_str) {
            None | Some("desk") => Self::desk(),
            Some("full") => Self::full(),
            Some(p) => return Err(Error::Config(format!("unknown preset `{p}`"))),
        };
        fn num<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse `{v}`")))
        }
        fn triple<V: std::str::FromStr>(k: &str, v: &str) -> Result<[V; 3]> {
            let items = v.split(',').map(|p| num(k, p.trim())).collect::<Result<Vec<V>>>()?;
            items.try_into().map_err(|_| Error::Config(format!("{k}: expected 3 values, got `{v}`")))
        }
        let (mut origin, mut size, mut dims) = (c.spec.origin, c.spec.voxel_size, c.spec.dims);
        for (k, v) in &kv {
            match k.as_str() {
                "preset" => {}
                "origin" => origin = triple(k, v)?,
                "voxel_size" => size = num(k, v)?,
                "dims" => dims = triple(k, v)?,
                "frames" => c.frames = num(k, v)?,
                "width" => c.width = num(k, v)?,
                "height" => c.height = num(k, v)?,
                "focal" => c.focal = num(k, v)?,
                "frame_spacing" => c.frame_spacing = num(k, v)?,
                "difficulty" => c.params.difficulty = num(k, v)?,
                "invalid_prob" => c.params.invalid_prob = num(k, v)?,
                _ => return Err(Error::Config(format!("unknown synth key `{k}`"))),
            }
        }
        c.spec = SceneSpec::new(origin, size, dims)?;
        if c.frames == 0 || c.width == 0 || c.height == 0 || !(c.focal > 0.0) {
            return Err(Error::Config("frames, width, height and focal must be positive".into()));
        }
        if !(0.0..=1.0).contains(&c.params.invalid_prob) {
            return Err(Error::Config(format!("invalid_prob {} outside [0, 1]", c.params.invalid_prob)));
        }
        Ok(c)
    }

    /// Frame `t` (0 = current) looks along +x from `(-spacing * t, 0, 0)`.
    pub fn cameras(&self) -> Result<Vec<CameraModel>> {
        if self.frames == 0 {
            return Err(Error::invalid("at least one frame is required"));
        }
        (0..self.frames)
            .map(|t| {
                CameraModel::forward_facing(
                    self.focal,
                    self.width,
                    self.height,
                    [-self.frame_spacing * t as f64, 0.0, 0.0],
                )
            })
            .collect()
    }
}

/// One generated scene with its frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub seed: u64,
    pub cams: Vec<CameraModel>,
    /// Row-major `[height, width]` camera-z depth per frame; 0 where invalid.
    pub depths: Vec<Vec<f32>>,
    /// Labels at output resolution.
    pub labels: VoxelGrid<u8>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.cams.len()
    }
}

pub fn synth_sample(seed: u64, id: &str, cfg: &SynthConfig) -> Result<Sample> {
    let desc = generate_scene(seed, &cfg.spec, &cfg.params);
    let cams = cfg.cameras()?;
    let out_spec = cfg.spec.upsampled(2);
    let mut labels = rasterize_labels(&desc, &out_spec);
    if cfg.params.invalid_prob > 0.0 {
        let seen = observed_mask(&desc, &cams, &out_spec);
        let mut r = rng::stream(seed, "invalid");
        for (v, s) in labels.values.iter_mut().zip(seen) {
            let u: f64 = r.random();
            if !s && u < cfg.params.invalid_prob {
                *v = INVALID;
            }
        }
    }
    let depths = cams.iter().map(|c| render_depth(&desc, c)).collect();
    Ok(Sample {
        id: id.to_string(),
        seed,
        cams,
        depths,
        labels,
    })
}

//! Pinhole cameras, FOV masks, depth back-projection and the lifting of 2D
//! feature maps onto voxel centroids.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix3x4, Vector3};

use crate::autodiff::{Graph, SampleMap, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::voxel::SceneSpec;

/// Intrinsics `K`, world-to-camera extrinsics `T = [R | t]` and image size.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    k: Matrix3<f64>,
    t: Matrix3x4<f64>,
    k_inv: Matrix3<f64>,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting one world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub uv: [f64; 2],
    /// Camera-frame z.
    pub depth: f64,
    pub in_fov: bool,
}

impl CameraModel {
    pub fn new(k: [[f64; 3]; 3], t: [[f64; 4]; 3], width: usize, height: usize) -> Result<Self> {
        let k = Matrix3::from_fn(|r, c| k[r][c]);
        let t = Matrix3x4::from_fn(|r, c| t[r][c]);
        if k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::invalid("intrinsics: last row must be [0, 0, 1]"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::invalid("intrinsics: focal lengths must be positive"));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::invalid("intrinsics: singular K"))?;
        let r = t.fixed_view::<3, 3>(0, 0);
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= 1e-6) {
            return Err(Error::invalid(format!(
                "extrinsics: rotation is not orthonormal (deviation {err:e})"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(Self {
            k,
            t,
            k_inv,
            width,
            height,
        })
    }

    /// Simple camera: focal `f`, principal point at the image centre.
    pub fn pinhole(f: f64, width: usize, height: usize, t: [[f64; 4]; 3]) -> Result<Self> {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        Self::new([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]], t, width, height)
    }

    /// Forward-facing camera at `position` for the scene convention x forward,
    /// y left, z up. Camera axes: x right, y down, z forward.
    pub fn forward_facing(f: f64, width: usize, height: usize, position: [f64; 3]) -> Result<Self> {
        let r = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let mut t = [[0.0; 4]; 3];
        for i in 0..3 {
            t[i][..3].copy_from_slice(&r[i]);
            t[i][3] = -(0..3).map(|j| r[i][j] * position[j]).sum::<f64>();
        }
        Self::pinhole(f, width, height, t)
    }

    pub fn intrinsics(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.k[(r, c)]))
    }

    pub fn extrinsics(&self) -> [[f64; 4]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.t[(r, c)]))
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let r = self.t.fixed_view::<3, 3>(0, 0);
        let c = -(r.transpose() * self.t.column(3));
        [c.x, c.y, c.z]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let c = self.t * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
        [c.x, c.y, c.z]
    }

    pub fn project_point(&self, p: [f64; 3]) -> Projection {
        let c = self.to_camera(p);
        let h = self.k * Vector3::from(c);
        let depth = c[2];
        let uv = [h.x / h.z, h.y / h.z];
        let in_fov = depth > 0.0
            && uv[0] >= 0.0
            && uv[0] < self.width as f64
            && uv[1] >= 0.0
            && uv[1] < self.height as f64;
        Projection { uv, depth, in_fov }
    }

    pub fn project(&self, points: &[[f64; 3]]) -> Vec<Projection> {
        points.iter().map(|&p| self.project_point(p)).collect()
    }

    /// World point at camera-z `depth` on the ray through pixel position `(u, v)`.
    pub fn back_project_pixel(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let c = self.k_inv * Vector3::new(u, v, 1.0) * depth;
        let r = self.t.fixed_view::<3, 3>(0, 0);
        let w = r.transpose() * (c - self.t.column(3));
        [w.x, w.y, w.z]
    }

    /// World-frame unit direction of the ray through `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> [f64; 3] {
        let c = (self.k_inv * Vector3::new(u, v, 1.0)).normalize();
        let w = self.t.fixed_view::<3, 3>(0, 0).transpose() * c;
        [w.x, w.y, w.z]
    }
}

/// Pixel centre of column `col`, row `row`.
pub fn pixel_center(col: usize, row: usize) -> (f64, f64) {
    (col as f64 + 0.5, row as f64 + 0.5)
}

/// Back-projects every `stride`-th pixel (rows and columns) of a row-major
/// `[height, width]` depth map, sampled at pixel centres. Non-positive and
/// non-finite depths are skipped.
pub fn back_project_depth(depth: &[f32], cam: &CameraModel, stride: usize) -> Result<Vec<[f64; 3]>> {
    if depth.len() != cam.width * cam.height {
        return Err(Error::shape(
            "back_project_depth",
            format!("{} depth values for a {}x{} image", depth.len(), cam.width, cam.height),
        ));
    }
    let stride = stride.max(1);
    let mut out = Vec::new();
    for row in (0..cam.height).step_by(stride) {
        for col in (0..cam.width).step_by(stride) {
            let d = depth[row * cam.width + col] as f64;
            if d > 0.0 && d.is_finite() {
                let (u, v) = pixel_center(col, row);
                out.push(cam.back_project_pixel(u, v, d));
            }
        }
    }
    Ok(out)
}

/// Voxels of `spec` whose centroid projects inside the image with positive depth.
pub fn fov_mask(cam: &CameraModel, spec: &SceneSpec) -> Vec<bool> {
    spec.centroids()
        .into_iter()
        .map(|p| cam.project_point(p).in_fov)
        .collect()
}

/// Hit-count weight: `1 / delta` for `delta > 0`, otherwise 1.
pub fn hit_weight(delta: usize) -> f64 {
    if delta == 0 {
        1.0
    } else {
        1.0 / delta as f64
    }
}

/// Precomputed sampling of `N_t` feature maps at a set of 3D points.
#[derive(Debug, Clone)]
pub struct ViewPlan {
    pub map: Arc<SampleMap>,
    /// Number of frames that see each point.
    pub hits: Vec<u32>,
    pub feat_hw: [usize; 2],
}

impl ViewPlan {
    /// Plans bilinear sampling of `[N_t, C, Hf, Wf]` features, where one
    /// feature cell spans `stride` image pixels and feature cell `j` is centred
    /// on pixel coordinate `(j + 0.5) * stride`.
    pub fn new(cams: &[CameraModel], points: &[[f64; 3]], feat_hw: [usize; 2], stride: f64) -> Result<Self> {
        let [hf, wf] = feat_hw;
        if hf == 0 || wf == 0 || !(stride > 0.0) {
            return Err(Error::invalid(format!(
                "feature map {hf}x{wf} with stride {stride}"
            )));
        }
        let mut map = SampleMap::new(cams.len(), hf * wf);
        let mut hits = Vec::with_capacity(points.len());
        let mut taps: Vec<(usize, usize, f64)> = Vec::with_capacity(4 * cams.len());
        for &p in points {
            taps.clear();
            let mut delta = 0usize;
            for (t, cam) in cams.iter().enumerate() {
                let pr = cam.project_point(p);
                if !pr.in_fov {
                    continue;
                }
                delta += 1;
                let fu = (pr.uv[0] / stride - 0.5).clamp(0.0, (wf - 1) as f64);
                let fv = (pr.uv[1] / stride - 0.5).clamp(0.0, (hf - 1) as f64);
                let (u0, v0) = (fu.floor() as usize, fv.floor() as usize);
                let (a, b) = (fu - u0 as f64, fv - v0 as f64);
                let u1 = (u0 + 1).min(wf - 1);
                let v1 = (v0 + 1).min(hf - 1);
                for (row, col, w) in [
                    (v0, u0, (1.0 - a) * (1.0 - b)),
                    (v0, u1, a * (1.0 - b)),
                    (v1, u0, (1.0 - a) * b),
                    (v1, u1, a * b),
                ] {
                    if w != 0.0 {
                        taps.push((t, row * wf + col, w));
                    }
                }
            }
            let scale = if delta == 0 { 0.0 } else { hit_weight(delta) };
            map.push_site(taps.iter().map(|&(t, s, w)| (t, s, w * scale)));
            hits.push(delta as u32);
        }
        Ok(Self {
            map: Arc::new(map),
            hits,
            feat_hw,
        })
    }

    /// Plan over every voxel centroid of `spec`.
    pub fn for_grid(cams: &[CameraModel], spec: &SceneSpec, feat_hw: [usize; 2], stride: f64) -> Result<Self> {
        Self::new(cams, &spec.centroids(), feat_hw, stride)
    }

    /// Union of the frames' FOV masks.
    pub fn seen(&self) -> impl Iterator<Item = bool> + '_ {
        self.hits.iter().map(|&h| h > 0)
    }
}

/// Lifts `[N_t, C, Hf, Wf]` features to a `[C, X, Y, Z]` volume.
pub fn view_transform<T: Scalar>(g: &mut Graph<T>, feats: Var, plan: &ViewPlan, dims: [usize; 3]) -> Result<Var> {
    if plan.map.n_out != dims.iter().product::<usize>() {
        return Err(Error::shape(
            "view_transform",
            format!("plan covers {} points, grid {:?}", plan.map.n_out, dims),
        ));
    }
    let cols = g.weighted_sample(feats, plan.map.clone())?;
    let c = g.shape(cols)[0];
    g.reshape(cols, vec![c, dims[0], dims[1], dims[2]])
}

/// Text form: `K` + 9 values, `T` + 12 values, `SIZE width height`.
pub fn format_camera(cam: &CameraModel) -> String {
    let mut s = String::from("K");
    for r in cam.intrinsics() {
        for v in r {
            write!(s, " {v}").unwrap();
        }
    }
    s.push_str("\nT");
    for r in cam.extrinsics() {
        for v in r {
            write!(s, " {v}").unwrap();
        }
    }
    writeln!(s, "\nSIZE {} {}", cam.width, cam.height).unwrap();
    s
}

pub fn format_cameras(cams: &[CameraModel]) -> String {
    cams.iter().map(format_camera).collect::<Vec<_>>().join("\n")
}

/// Parses one or more camera blocks. Blank lines and `#` comments are ignored.
pub fn parse_cameras(text: &str) -> Result<Vec<CameraModel>> {
    let mut cams = Vec::new();
    let mut k: Option<Vec<f64>> = None;
    let mut t: Option<Vec<f64>> = None;
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        let nums: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(start, format!("camera line `{tag}`: {e}")))?;
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::format(
                    start,
                    format!("camera line `{tag}` has {} values, expected {n}", nums.len()),
                ))
            }
        };
        match tag {
            "K" => {
                want(9)?;
                k = Some(nums);
            }
            "T" => {
                want(12)?;
                t = Some(nums);
            }
            "SIZE" => {
                want(2)?;
                let (Some(kv), Some(tv)) = (k.take(), t.take()) else {
                    return Err(Error::format(start, "SIZE before K and T"));
                };
                if nums.iter().any(|v| *v < 1.0 || v.fract() != 0.0) {
                    return Err(Error::format(start, "image size must be positive integers"));
                }
                let km = std::array::from_fn(|r| std::array::from_fn(|c| kv[r * 3 + c]));
                let tm = std::array::from_fn(|r| std::array::from_fn(|c| tv[r * 4 + c]));
                let cam = CameraModel::new(km, tm, nums[0] as usize, nums[1] as usize)
                    .map_err(|e| Error::format(start, e))?;
                cams.push(cam);
            }
            other => return Err(Error::format(start, format!("unknown camera tag `{other}`"))),
        }
    }
    if k.is_some() || t.is_some() {
        return Err(Error::format(offset, "incomplete camera block"));
    }
    Ok(cams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    const IDENTITY: [[f64; 4]; 3] = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]];

    fn cam100() -> CameraModel {
        CameraModel::new([[100.0, 0.0, 60.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]], IDENTITY, 120, 80).unwrap()
    }

    fn rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw).matrix()
    }

    fn extrinsics(r: Matrix3<f64>, t: [f64; 3]) -> [[f64; 4]; 3] {
        std::array::from_fn(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)], t[i]])
    }

    #[test]
    fn pinhole_examples() {
        let c = cam100();
        let p = c.project_point([0.0, 0.0, 5.0]);
        assert_eq!((p.uv, p.depth, p.in_fov), ([60.0, 40.0], 5.0, true));
        let p = c.project_point([1.0, 0.0, 5.0]);
        assert!((p.uv[0] - 80.0).abs() < 1e-12 && (p.uv[1] - 40.0).abs() < 1e-12);
        assert!(!c.project_point([0.0, 0.0, -1.0]).in_fov);
        assert_eq!(c.back_project_pixel(60.0, 40.0, 5.0), [0.0, 0.0, 5.0]);
    }

    #[test]
    fn invalid_cameras_rejected() {
        let k = [[100.0, 0.0, 60.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]];
        let mut bad = IDENTITY;
        bad[0][0] = 1.1;
        assert!(CameraModel::new(k, bad, 10, 10).is_err());
        let mut kb = k;
        kb[2] = [0.0, 0.1, 1.0];
        assert!(CameraModel::new(kb, IDENTITY, 10, 10).is_err());
        kb = k;
        kb[0][0] = 0.0;
        assert!(CameraModel::new(kb, IDENTITY, 10, 10).is_err());
    }

    #[test]
    fn half_open_image_bounds() {
        let c = cam100();
        // u = 120 exactly on the right edge, v = 80 on the bottom edge
        assert!(!c.project_point([0.6, 0.0, 1.0]).in_fov);
        assert!(!c.project_point([0.0, 0.4, 1.0]).in_fov);
        assert!(c.project_point([-0.6, -0.4, 1.0]).in_fov);
    }

    #[test]
    fn fov_mask_excludes_everything_behind_camera() {
        let spec = SceneSpec::desk();
        let cam = CameraModel::forward_facing(128.0, 256, 96, [12.8, 0.0, 0.0]).unwrap();
        let mask = fov_mask(&cam, &spec);
        for (i, m) in mask.iter().enumerate() {
            let p = spec.centroid(spec.coord(i));
            if p[0] <= 12.8 {
                assert!(!m);
            }
        }
        assert!(mask.iter().any(|&m| m));
    }

    #[test]
    fn fov_mask_matches_pointwise_projection() {
        let spec = SceneSpec::desk();
        let r = rotation(0.2, -0.1, 0.05) * forward_rotation();
        let cam = CameraModel::pinhole(90.0, 200, 70, extrinsics(r, [1.0, -2.0, 3.0])).unwrap();
        let mask = fov_mask(&cam, &spec);
        for (i, &m) in mask.iter().enumerate() {
            let p = spec.centroid(spec.coord(i));
            // independent: explicit matrix arithmetic
            let c = [0, 1, 2].map(|a| (0..3).map(|b| r[(a, b)] * p[b]).sum::<f64>() + [1.0, -2.0, 3.0][a]);
            let u = 90.0 * c[0] / c[2] + 100.0;
            let v = 90.0 * c[1] / c[2] + 35.0;
            let expect = c[2] > 0.0 && (0.0..200.0).contains(&u) && (0.0..70.0).contains(&v);
            assert_eq!(m, expect, "voxel {i}");
        }
    }

    fn forward_rotation() -> Matrix3<f64> {
        Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0)
    }

    #[test]
    fn zero_depth_gives_no_points() {
        let c = cam100();
        assert!(back_project_depth(&vec![0.0; 120 * 80], &c, 1).unwrap().is_empty());
        assert!(back_project_depth(&[1.0; 3], &c, 1).is_err());
    }

    #[test]
    fn hit_weights_follow_hit_count() {
        assert_eq!(hit_weight(0), 1.0);
        assert_eq!(hit_weight(1), 1.0);
        assert_eq!(hit_weight(2), 0.5);
        assert_eq!(hit_weight(5), 0.2);
    }

    #[test]
    fn two_frames_average_and_unseen_is_zero() {
        // Single-channel 1x1 feature maps holding 2 and 4.
        let a = cam100();
        let b = cam100();
        let plan = ViewPlan::new(&[a, b], &[[0.0, 0.0, 5.0], [0.0, 0.0, -5.0]], [1, 1], 120.0).unwrap();
        assert_eq!(plan.hits, vec![2, 0]);
        let mut g = Graph::<f64>::new();
        let f = g.input(Tensor::from_f64([2, 1, 1, 1], &[2.0, 4.0]).unwrap());
        let y = g.weighted_sample(f, plan.map.clone()).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 0.0]);
    }

    #[test]
    fn projection_on_cell_centre_reads_that_cell() {
        let cam = cam100();
        // stride 4: cell (row 3, col 7) is centred on pixel (30, 14)
        let p = cam.back_project_pixel(30.0, 14.0, 7.0);
        let plan = ViewPlan::new(&[cam], &[p], [20, 30], 4.0).unwrap();
        let feats: Vec<f64> = (0..600).map(|i| i as f64 * 0.5 - 3.0).collect();
        let out = plan.map.apply(&feats, 1);
        assert!((out[0] - feats[3 * 30 + 7]).abs() < 1e-12);
    }

    #[test]
    fn camera_text_round_trip() {
        let r = rotation(0.3, 0.1, -0.2) * forward_rotation();
        let cam = CameraModel::pinhole(123.25, 64, 48, extrinsics(r, [0.5, 1.0 / 3.0, -2.0])).unwrap();
        let text = format_cameras(&[cam.clone(), cam100()]);
        let back = parse_cameras(&text).unwrap();
        assert_eq!(back, vec![cam, cam100()]);
        let err = parse_cameras("K 1 0 0 0 1 0 0 0 1\nT 1 0 0 0\n").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 20, .. }), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn back_projection_round_trips(yaw in -1.0f64..1.0, pitch in -0.3f64..0.3, tx in -3.0f64..3.0,
                                       u in 0.0f64..120.0, v in 0.0f64..80.0, d in 0.1f64..80.0) {
            let r = rotation(yaw, pitch, 0.0) * forward_rotation();
            let cam = CameraModel::new([[100.0, 0.0, 60.0], [0.0, 95.0, 40.0], [0.0, 0.0, 1.0]],
                                       extrinsics(r, [tx, 0.5, -1.0]), 120, 80).unwrap();
            let p = cam.back_project_pixel(u, v, d);
            let pr = cam.project_point(p);
            prop_assert!((pr.uv[0] - u).abs() < 1e-6 && (pr.uv[1] - v).abs() < 1e-6);
            prop_assert!((pr.depth - d).abs() < 1e-9);
            prop_assert!(pr.in_fov);
        }

        #[test]
        fn view_transform_is_frame_invariant(yaw in -3.0f64..3.0, pitch in -1.0f64..1.0, roll in -1.0f64..1.0,
                                             shift in proptest::array::uniform3(-20.0f64..20.0)) {
            let spec = SceneSpec::new([0.13, -6.37, -2.05], 1.6, [8, 8, 4]).unwrap();
            let cams = [
                CameraModel::forward_facing(40.0, 64, 24, [0.0, 0.0, 0.0]).unwrap(),
                CameraModel::forward_facing(40.0, 64, 24, [-0.5, 0.0, 0.0]).unwrap(),
            ];
            let pts = spec.centroids();
            let plan = ViewPlan::new(&cams, &pts, [6, 16], 4.0).unwrap();
            // Move the world by G and every camera by G^-1.
            let g = rotation(yaw, pitch, roll);
            let gt = Vector3::from(shift);
            let moved: Vec<[f64; 3]> = pts.iter().map(|p| {
                let q = g * Vector3::from(*p) + gt;
                [q.x, q.y, q.z]
            }).collect();
            let moved_cams: Vec<CameraModel> = cams.iter().map(|c| {
                let r = Matrix3::from_fn(|i, j| c.extrinsics()[i][j]);
                let t = Vector3::from_fn(|i, _| c.extrinsics()[i][3]);
                let r2 = r * g.transpose();
                let t2 = t - r2 * gt;
                CameraModel::new(c.intrinsics(), extrinsics(r2, [t2.x, t2.y, t2.z]), c.width, c.height).unwrap()
            }).collect();
            let plan2 = ViewPlan::new(&moved_cams, &moved, [6, 16], 4.0).unwrap();
            prop_assert_eq!(&plan.hits, &plan2.hits);
            let feats: Vec<f64> = (0..2 * 3 * 96).map(|i| ((i * 37) % 101) as f64 / 10.0).collect();
            let a = plan.map.apply(&feats, 3);
            let b = plan2.map.apply(&feats, 3);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            // zero exactly where no frame sees the voxel
            for (i, seen) in plan.seen().enumerate() {
                if !seen {
                    prop_assert!((0..3).all(|c| a[c * pts.len() + i] == 0.0));
                }
            }
        }
    }
}

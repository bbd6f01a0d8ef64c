//! Image encoder and its per-pixel input proxy.
//!
//! The encoder input for one frame is a `[classes + 1, H, W]` image: a one-hot
//! class id per pixel followed by depth divided by a fixed scale.

use crate::autodiff::{Graph, Var};
use crate::camera::{pixel_center, CameraModel};
use crate::error::{Error, Result};
use crate::nn::Conv2;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::voxel::{VoxelGrid, INVALID};

/// Stride-2 3x3 convolutions with relu between stages (none after the last).
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub in_channels: usize,
    pub out_channels: usize,
    stages: Vec<Conv2>,
}

impl ImageEncoder {
    /// `widths` lists every stage's output channels; the last is the feature width.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::invalid("image encoder needs at least one stage"));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Conv2::new(store, &format!("{name}.s{i}"), c, w, 3, 2)?);
            c = w;
        }
        Ok(Self {
            in_channels: cin,
            out_channels: c,
            stages,
        })
    }

    /// Downsampling factor between the input image and the feature map.
    pub fn stride(&self) -> usize {
        1 << self.stages.len()
    }

    /// Feature map size `[Hf, Wf]` for an `h x w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> [usize; 2] {
        let mut hw = [h, w];
        for _ in &self.stages {
            hw = hw.map(|d| (d + 1) / 2);
        }
        hw
    }

    /// `[N_t, C_in, H, W]` to `[N_t, C, Hf, Wf]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let last = self.stages.len() - 1;
        let mut h = x;
        for (i, s) in self.stages.iter().enumerate() {
            h = s.forward(g, store, h)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Class id per pixel read from a label grid: the back-projected depth point
/// is pushed half a voxel along the viewing ray and the label there is taken.
/// Pixels without depth, or landing on empty or invalid voxels, get class 0.
pub fn class_image(depth: &[f32], cam: &CameraModel, labels: &VoxelGrid<u8>) -> Result<Vec<u8>> {
    let (w, h) = (cam.width, cam.height);
    if depth.len() != w * h {
        return Err(Error::shape(
            "class_image",
            format!("{} depth values for a {w}x{h} image", depth.len()),
        ));
    }
    let push = 0.5 * labels.spec.voxel_size;
    let mut out = vec![0u8; w * h];
    for row in 0..h {
        for col in 0..w {
            let d = depth[row * w + col] as f64;
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let (u, v) = pixel_center(col, row);
            let p = cam.back_project_pixel(u, v, d);
            let r = cam.ray_direction(u, v);
            let q = [p[0] + push * r[0], p[1] + push * r[1], p[2] + push * r[2]];
            for x in [q, p] {
                if let Some(c) = labels.spec.world_to_voxel(x) {
                    let l = *labels.get(c);
                    if l != 0 && l != INVALID {
                        out[row * w + col] = l;
                        break;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stacks per-frame proxies into `[N_t, classes + 1, H, W]`.
pub fn encoder_input<T: Scalar>(
    class_ids: &[Vec<u8>],
    depths: &[Vec<f32>],
    classes: usize,
    hw: [usize; 2],
    depth_scale: f64,
) -> Result<Tensor<T>> {
    let [h, w] = hw;
    let n = h * w;
    if class_ids.len() != depths.len() || class_ids.iter().any(|c| c.len() != n) || depths.iter().any(|d| d.len() != n) {
        return Err(Error::shape(
            "encoder_input",
            format!("{} class images / {} depth maps for {h}x{w}", class_ids.len(), depths.len()),
        ));
    }
    let ch = classes + 1;
    let mut data = vec![T::zero(); class_ids.len() * ch * n];
    for (t, (ids, dep)) in class_ids.iter().zip(depths).enumerate() {
        let base = t * ch * n;
        for (i, (&c, &d)) in ids.iter().zip(dep).enumerate() {
            if (c as usize) < classes {
                data[base + c as usize * n + i] = T::one();
            }
            data[base + classes * n + i] = T::lit(d.max(0.0) as f64 / depth_scale);
        }
    }
    Tensor::new([class_ids.len(), ch, h, w], data)
}

//! Model and training configuration as flat `key=value` text.

use std::fmt::Write as _;

use crate::dataset::parse_key_values;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::synth::CLASS_NAMES;
use crate::voxel::SceneSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Lifted feature width `C`.
    pub channels: usize,
    /// Occupancy decoder feature width `C_o`.
    pub occ_channels: usize,
    pub classes: usize,
    /// Seed threshold on occupancy probability.
    pub theta: f64,
    pub mssd_layers: usize,
    pub frames: usize,
    /// Working grid.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    /// Output width of every image encoder stage; the last equals `channels`.
    pub encoder_widths: Vec<usize>,
    pub unet_widths: [usize; 3],
    /// Pixel stride when back-projecting depth into points.
    pub point_stride: usize,
    /// Std of additive Gaussian depth noise (metres) applied to model inputs.
    pub depth_noise: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Optimizer steps; when non-zero this overrides `epochs`.
    pub steps: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub sem_loss: bool,
    pub geo_loss: bool,
    pub class_names: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        let spec = SceneSpec::desk();
        Self {
            channels: 16,
            occ_channels: 8,
            classes: CLASS_NAMES.len(),
            theta: 0.5,
            mssd_layers: 1,
            frames: 1,
            origin: spec.origin,
            voxel_size: spec.voxel_size,
            dims: spec.dims,
            encoder_widths: vec![16, 16, 16, 16],
            unet_widths: [16, 32, 64],
            point_stride: 1,
            depth_noise: 0.0,
            lr: 2e-4,
            weight_decay: 1e-2,
            epochs: 40,
            steps: 0,
            grad_accum: 1,
            seed: 0,
            sem_loss: true,
            geo_loss: true,
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn full() -> Self {
        let spec = SceneSpec::full();
        Self {
            channels: 128,
            mssd_layers: 3,
            origin: spec.origin,
            voxel_size: spec.voxel_size,
            dims: spec.dims,
            encoder_widths: vec![32, 64, 128, 128],
            ..Self::desk()
        }
    }

    pub fn spec(&self) -> Result<SceneSpec> {
        SceneSpec::new(self.origin, self.voxel_size, self.dims)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let positive = [
            ("channels", self.channels),
            ("occ_channels", self.occ_channels),
            ("mssd_layers", self.mssd_layers),
            ("frames", self.frames),
            ("point_stride", self.point_stride),
            ("grad_accum", self.grad_accum),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must be in (0, 1), got {}", self.theta));
        }
        if self.dims.iter().any(|&d| d == 0 || d % 4 != 0) {
            return bad(format!("dims must be positive multiples of 4, got {:?}", self.dims));
        }
        if !(self.voxel_size > 0.0) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.encoder_widths.last() != Some(&self.channels) || self.encoder_widths.contains(&0) {
            return bad(format!(
                "encoder_widths {:?} must be positive and end with channels = {}",
                self.encoder_widths, self.channels
            ));
        }
        if self.unet_widths.contains(&0) {
            return bad("unet_widths must be positive".into());
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.depth_noise >= 0.0) {
            return bad("lr, weight_decay and depth_noise must be non-negative".into());
        }
        if self.class_names.len() != self.classes {
            return bad(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.classes
            ));
        }
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
        }
        fn list<V: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<V>> {
            v.split(',').map(|p| num(key, p.trim())).collect()
        }
        fn arr<V: std::str::FromStr + std::fmt::Debug, const N: usize>(key: &str, v: &str) -> Result<[V; N]> {
            list(key, v)?
                .try_into()
                .map_err(|_| Error::Config(format!("{key}: expected {N} values, got `{v}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true/false, got `{v}`"))),
            }
        }
        match key {
            "channels" => self.channels = num(key, value)?,
            "occ_channels" => self.occ_channels = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "theta" => self.theta = num(key, value)?,
            "mssd_layers" => self.mssd_layers = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "origin" => self.origin = arr(key, value)?,
            "voxel_size" => self.voxel_size = num(key, value)?,
            "dims" => self.dims = arr(key, value)?,
            "encoder_widths" => self.encoder_widths = list(key, value)?,
            "unet_widths" => self.unet_widths = arr(key, value)?,
            "point_stride" => self.point_stride = num(key, value)?,
            "depth_noise" => self.depth_noise = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "grad_accum" => self.grad_accum = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "sem_loss" => self.sem_loss = flag(key, value)?,
            "geo_loss" => self.geo_loss = flag(key, value)?,
            "class_names" => self.class_names = value.split(',').map(|s| s.trim().to_string()).collect(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Starts from [`ModelConfig::desk`] and applies every `key=value` line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        for (k, v) in parse_key_values(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        fn join<V: ToString>(v: &[V]) -> String {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("channels", self.channels.to_string());
        kv("occ_channels", self.occ_channels.to_string());
        kv("classes", self.classes.to_string());
        kv("theta", self.theta.to_string());
        kv("mssd_layers", self.mssd_layers.to_string());
        kv("frames", self.frames.to_string());
        kv("origin", join(&self.origin));
        kv("voxel_size", self.voxel_size.to_string());
        kv("dims", join(&self.dims));
        kv("encoder_widths", join(&self.encoder_widths));
        kv("unet_widths", join(&self.unet_widths));
        kv("point_stride", self.point_stride.to_string());
        kv("depth_noise", self.depth_noise.to_string());
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("epochs", self.epochs.to_string());
        kv("steps", self.steps.to_string());
        kv("grad_accum", self.grad_accum.to_string());
        kv("seed", self.seed.to_string());
        kv("sem_loss", self.sem_loss.to_string());
        kv("geo_loss", self.geo_loss.to_string());
        kv("class_names", self.class_names.join(","));
        s
    }
}

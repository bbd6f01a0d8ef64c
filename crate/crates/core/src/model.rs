//! End-to-end network: image encoder, view transform, occupancy proposal,
//! seed guidance, aggregation and diffusion, plus the training objective.

use crate::autodiff::{Graph, Var};
use crate::camera::{back_project_depth, view_transform, ViewPlan};
use crate::config::ModelConfig;
use crate::diffusion::{Aggregation, Mssd, SeedSplit};
use crate::encoder::{class_image, encoder_input, ImageEncoder};
use crate::error::{Error, Result};
use crate::guidance::{seed_labels, GeometryHead, SemanticGuidance};
use crate::losses::{bce, cross_entropy, lovasz_softmax, ssc_loss, LossReport};
use crate::params::ParamStore;
use crate::proposal::{point_features, select_seeds, CoarseStage, UNet, POINT_FEATURES};
use crate::rng;
use crate::sparse::{SparseCoords, SparseLevels};
use crate::synth::Sample;
use crate::tensor::{Scalar, Tensor};
use crate::voxel::{argmax_channels, downsample_labels, upsample_nearest, SceneSpec, VoxelGrid, INVALID};

/// Whether training-only heads are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub spec: SceneSpec,
    encoder: ImageEncoder,
    coarse: CoarseStage,
    unet: UNet,
    geometry: GeometryHead,
    guidance: SemanticGuidance,
    aggregation: Aggregation,
    mssd: Mssd,
}

/// Everything about a sample that does not depend on the weights.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub id: String,
    /// `[N_t, classes + 1, H, W]`
    pub image: Tensor<T>,
    pub plan: ViewPlan,
    /// Point features `[5, N]` over `levels.fine`.
    pub points: Tensor<T>,
    pub levels: SparseLevels,
    /// Labels at output resolution.
    pub labels_out: VoxelGrid<u8>,
    /// Labels at working resolution.
    pub labels: VoxelGrid<u8>,
    pub occ_target: Vec<u8>,
    pub occ_mask: Vec<bool>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// Class logits and probabilities `[classes, X, Y, Z]`.
    pub logits: Var,
    pub probs: Var,
    /// Occupancy `O` and its logits, `[1, X, Y, Z]`.
    pub occ: Var,
    pub occ_logits: Var,
    /// Geometry-guidance logits `[1, X, Y, Z]` (train mode only).
    pub geo_logits: Option<Var>,
    /// Seed class logits `[classes, N_s]` (train mode only).
    pub sem_logits: Option<Var>,
    pub features_2d: Var,
    pub f3d: Var,
    pub split: SeedSplit,
}

impl Model {
    pub fn new<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let c = config.channels;
        let coarse = CoarseStage::new(store, "coarse", c)?;
        let unet_in = coarse.dense_channels();
        Ok(Self {
            encoder: ImageEncoder::new(store, "encoder", config.classes + 1, &config.encoder_widths)?,
            coarse,
            unet: UNet::new(store, "unet", unet_in, config.unet_widths, config.occ_channels)?,
            geometry: GeometryHead::new(store, "geometry", c)?,
            guidance: SemanticGuidance::new(store, "guidance", c, config.classes)?,
            aggregation: Aggregation::new(store, "aggregation", c, config.occ_channels)?,
            mssd: Mssd::new(store, "mssd", c + config.occ_channels, config.mssd_layers, config.classes)?,
            spec,
            config,
        })
    }

    /// A model with freshly initialized parameters keyed by `config.seed`.
    pub fn build<T: Scalar>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(config.seed);
        let m = Self::new(config, &mut store)?;
        Ok((m, store))
    }

    pub fn output_spec(&self) -> SceneSpec {
        self.spec.upsampled(2)
    }

    pub fn prepare<T: Scalar>(&self, sample: &Sample) -> Result<Prepared<T>> {
        let cfg = &self.config;
        let out = self.output_spec();
        let ls = &sample.labels.spec;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-6 * (1.0 + a.abs());
        if ls.dims != out.dims || !close(ls.voxel_size, out.voxel_size) || (0..3).any(|a| !close(ls.origin[a], out.origin[a])) {
            return Err(Error::Config(format!(
                "sample {}: label grid {:?} at {} m does not match the model's output grid {:?} at {} m",
                sample.id, ls.dims, ls.voxel_size, out.dims, out.voxel_size
            )));
        }
        if sample.frames() < cfg.frames {
            return Err(Error::Config(format!(
                "sample {} has {} frames, model needs {}",
                sample.id,
                sample.frames(),
                cfg.frames
            )));
        }
        let cams = &sample.cams[..cfg.frames];
        let (w, h) = (cams[0].width, cams[0].height);
        if cams.iter().any(|c| c.width != w || c.height != h) {
            return Err(Error::invalid(format!("sample {}: frames differ in image size", sample.id)));
        }
        let mut depths: Vec<Vec<f32>> = sample.depths[..cfg.frames].to_vec();
        let classes: Vec<Vec<u8>> = cams
            .iter()
            .zip(&depths)
            .map(|(c, d)| class_image(d, c, &sample.labels))
            .collect::<Result<_>>()?;
        if cfg.depth_noise > 0.0 {
            for (t, d) in depths.iter_mut().enumerate() {
                let mut r = rng::stream_indexed(cfg.seed ^ sample.seed, "depth-noise", t as u64);
                for v in d.iter_mut() {
                    let n = rng::normal(&mut r);
                    if *v > 0.0 {
                        *v = (*v as f64 + cfg.depth_noise * n).max(1e-3) as f32;
                    }
                }
            }
        }
        let depth_scale = self.spec.dims[0] as f64 * self.spec.voxel_size;
        let image = encoder_input(&classes, &depths, cfg.classes, [h, w], depth_scale)?;
        let feat_hw = self.encoder.feature_hw(h, w);
        let plan = ViewPlan::for_grid(cams, &self.spec, feat_hw, self.encoder.stride() as f64)?;

        let pts = back_project_depth(&depths[0], &cams[0], cfg.point_stride)?;
        let set = point_features::<T>(&pts, &self.spec)?;
        let levels = SparseLevels::new(SparseCoords::new(set.coords, self.spec.dims)?);

        let labels = downsample_labels(&sample.labels, 2)?;
        let occ_target = labels.values.iter().map(|&l| u8::from(l != 0 && l != INVALID)).collect();
        let occ_mask = labels.values.iter().map(|&l| l != INVALID).collect();
        if let Some(&bad) = labels.values.iter().find(|&&l| l != INVALID && l as usize >= cfg.classes) {
            return Err(Error::Config(format!(
                "sample {}: label {bad} with {} classes",
                sample.id, cfg.classes
            )));
        }
        Ok(Prepared {
            id: sample.id.clone(),
            image,
            plan,
            points: set.feats,
            levels,
            labels_out: sample.labels.clone(),
            labels,
            occ_target,
            occ_mask,
        })
    }

    /// Lifted features `F^3D` `[C, X, Y, Z]` and the 2D features they came from.
    pub fn lift<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, prep: &Prepared<T>) -> Result<(Var, Var)> {
        let img = g.constant(prep.image.clone());
        let f2d = self.encoder.forward(g, store, img)?;
        let f3d = view_transform(g, f2d, &prep.plan, self.spec.dims)?;
        Ok((f3d, f2d))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, prep: &Prepared<T>, mode: Mode) -> Result<Outputs> {
        let dims = self.spec.dims;
        let train = mode == Mode::Train;
        let (f3d, features_2d) = self.lift(g, store, prep)?;
        let geo_logits = if train {
            Some(self.geometry.forward(g, store, f3d)?)
        } else {
            None
        };

        if prep.points.shape() != [POINT_FEATURES, prep.levels.len()] {
            return Err(Error::shape("model", format!("point features {:?}", prep.points.shape())));
        }
        let pts = g.constant(prep.points.clone());
        let coarse = self.coarse.forward(g, store, pts, &prep.levels)?;
        let dense = self.coarse.densify(g, &coarse, prep.levels.fine.coords(), dims)?;
        let occ = self.unet.forward(g, store, dense)?;

        let split = SeedSplit::new(select_seeds(g.value(occ.probs).data(), self.config.theta), dims)?;
        let seed_levels = SparseLevels::new(SparseCoords::new(split.coords(), dims)?);
        let f0 = g.gather_cols(f3d, split.seeds.clone())?;
        let seeds = self.guidance.forward(g, store, f0, &seed_levels, train)?;
        let fused = self.aggregation.forward(g, store, seeds.feats, &split, f3d, occ.feats)?;
        let pred = self.mssd.forward(g, store, fused)?;
        Ok(Outputs {
            logits: pred.logits,
            probs: pred.probs,
            occ: occ.probs,
            occ_logits: occ.logits,
            geo_logits,
            sem_logits: seeds.logits,
            features_2d,
            f3d,
            split,
        })
    }

    /// `L_geo + L_occ + L_sem + L_ssc` for a train-mode forward pass.
    pub fn losses<T: Scalar>(&self, g: &mut Graph<T>, out: &Outputs, prep: &Prepared<T>) -> Result<LossReport> {
        let zero = |g: &mut Graph<T>| g.constant(Tensor::scalar(T::zero()));
        let geo = match (out.geo_logits, self.config.geo_loss) {
            (Some(l), true) => {
                let p = g.sigmoid(l);
                bce(g, p, &prep.occ_target, &prep.occ_mask)?
            }
            (None, true) => return Err(Error::invalid("losses need a train-mode forward pass")),
            _ => zero(g),
        };
        let occ = bce(g, out.occ, &prep.occ_target, &prep.occ_mask)?;
        let sem = match (out.sem_logits, self.config.sem_loss) {
            (Some(l), true) if !out.split.seeds.is_empty() => {
                let y = seed_labels(&prep.labels, &out.split.seeds)?;
                let ce = cross_entropy(g, l, &y)?;
                let p = g.softmax(l, 0)?;
                let lv = lovasz_softmax(g, p, &y)?;
                g.add(ce, lv)?
            }
            (None, true) => return Err(Error::invalid("losses need a train-mode forward pass")),
            _ => zero(g),
        };
        let ssc = ssc_loss(g, out.logits, out.probs, &prep.labels.values)?.total;
        LossReport::new(g, geo, occ, sem, ssc)
    }

    /// Argmax labels at working resolution.
    pub fn predict_working<T: Scalar>(&self, g: &Graph<T>, out: &Outputs) -> Vec<u8> {
        argmax_channels(g.value(out.probs).data(), self.config.classes)
    }

    /// Argmax labels upsampled to output resolution.
    pub fn predict<T: Scalar>(&self, g: &Graph<T>, out: &Outputs) -> VoxelGrid<u8> {
        let w = self.predict_working(g, out);
        let up = upsample_nearest(&w, 1, self.spec.dims, 2);
        VoxelGrid::from_values(self.output_spec(), up).expect("upsampled size")
    }

    /// Parameter name prefixes of the heads evaluated only in train mode.
    pub const TRAINING_HEADS: [&'static str; 2] = ["geometry.", "guidance.head."];

    /// Copy of `store` with every training-only parameter replaced by an empty
    /// tensor, so any use of one fails.
    pub fn without_training_heads<T: Scalar>(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        for id in store.ids() {
            if Self::TRAINING_HEADS.iter().any(|p| store.name(id).starts_with(p)) {
                *out.get_mut(id) = Tensor::zeros(vec![0]);
            }
        }
        out
    }

    /// Inference on one prepared sample.
    pub fn infer<T: Scalar>(&self, store: &ParamStore<T>, prep: &Prepared<T>) -> Result<(VoxelGrid<u8>, Tensor<T>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, prep, Mode::Infer)?;
        Ok((self.predict(&g, &out), g.value(out.probs).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_sample, SynthConfig};

    fn tiny() -> (ModelConfig, SynthConfig) {
        let spec = SceneSpec::new([0.0, -6.4, -2.0], 0.8, [16, 16, 8]).unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.origin = spec.origin;
        cfg.dims = spec.dims;
        cfg.channels = 8;
        cfg.occ_channels = 4;
        cfg.encoder_widths = vec![8, 8, 8, 8];
        cfg.unet_widths = [4, 8, 8];
        let syn = SynthConfig {
            spec,
            width: 128,
            height: 48,
            focal: 64.0,
            ..SynthConfig::desk()
        };
        (cfg, syn)
    }

    #[test]
    fn infer_and_train_agree_on_prediction() {
        let (cfg, syn) = tiny();
        let (model, store) = Model::build::<f64>(cfg).unwrap();
        let prep = model.prepare::<f64>(&synth_sample(2, "a", &syn).unwrap()).unwrap();
        let mut ga = Graph::new();
        let a = model.forward(&mut ga, &store, &prep, Mode::Train).unwrap();
        let mut gb = Graph::new();
        let b = model.forward(&mut gb, &store, &prep, Mode::Infer).unwrap();
        assert!(a.geo_logits.is_some() && b.geo_logits.is_none());
        assert!(b.sem_logits.is_none());
        assert_eq!(ga.value(a.probs), gb.value(b.probs));
        assert_eq!(ga.shape(a.probs), &[6, 16, 16, 8]);
        assert_eq!(model.predict(&gb, &b).spec.dims, [32, 32, 16]);
    }

    #[test]
    fn loss_is_finite_and_reaches_the_image_encoder() {
        let (cfg, syn) = tiny();
        let (model, store) = Model::build::<f64>(cfg).unwrap();
        let prep = model.prepare::<f64>(&synth_sample(4, "a", &syn).unwrap()).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &store, &prep, Mode::Train).unwrap();
        let rep = model.losses(&mut g, &out, &prep).unwrap();
        let v = rep.values(&g);
        assert!(v.total.is_finite() && v.total > 0.0);
        assert!((v.total - (v.geo + v.occ + v.sem + v.ssc)).abs() < 1e-12);
        g.backward(rep.total).unwrap();
        let enc = store.id("encoder.s0.w").unwrap();
        let grads = g.param_grads();
        let ge = grads.iter().find(|(id, _)| *id == enc).unwrap().1;
        assert!(ge.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn mismatched_sample_is_rejected() {
        let (cfg, _) = tiny();
        let (model, _) = Model::build::<f64>(cfg).unwrap();
        let s = synth_sample(1, "d", &SynthConfig { width: 64, height: 24, focal: 32.0, ..SynthConfig::desk() }).unwrap();
        assert!(matches!(model.prepare::<f64>(&s), Err(Error::Config(_))));
    }
}

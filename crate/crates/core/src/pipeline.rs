//! The full synthesis model: dynamic texture, deferred sampling, teeth
//! completion and neural rendering, plus the decoupling and audio networks
//! that drive geometry. All parameters live in one store.

use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::audio_exp::AudioExpNet;
use crate::ciec::Ciec;
use crate::decouple::DecoupleNets;
use crate::dyntex::{ciec_tensor, DynamicTexture};
use crate::face::{BlendshapeBasis, FaceParams};
use crate::nn::{Bound, ParamStore};
use crate::raster::{texture_sampler, Camera};
use crate::render::{mask_background, RenderNet, RenderVars};
use crate::rng::derive;
use crate::synth::FrameGeometry;
use crate::tape::{ResamplePlan, Tape, Var};
use crate::teeth::{per_frame, TeethNet, TeethWarp};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub texture_channels: usize,
    pub bases: usize,
    pub texture_size: usize,
    pub transcoder_hidden: usize,
    pub unet_width: usize,
    pub unet_depth: usize,
    /// Disabling the teeth submodule is the ablation setting.
    pub teeth: bool,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            texture_channels: 16,
            bases: 8,
            texture_size: 64,
            transcoder_hidden: 32,
            unet_width: 8,
            unet_depth: 2,
            teeth: true,
            height: 64,
            width: 64,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let m = 1usize << self.unet_depth;
        if self.texture_channels == 0 || self.texture_size == 0 || self.unet_width == 0 || self.transcoder_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.bases < 2 {
            return Err(Error::Config("need at least 2 texture bases".into()));
        }
        if self.height % m != 0 || self.width % m != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(alloc::format!(
                "image {}x{} must be at least 8 and divisible by {}",
                self.height,
                self.width,
                m
            )));
        }
        Ok(())
    }

    /// Channels entering the renderer besides the background features.
    pub fn face_channels(&self) -> usize {
        if self.teeth {
            2 * self.texture_channels
        } else {
            self.texture_channels
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub dyntex: DynamicTexture,
    pub teeth: Option<TeethNet>,
    pub render: RenderNet,
    pub decouple: DecoupleNets,
    pub audio: AudioExpNet,
}

impl Model {
    /// Registers every network in a fixed order; each draws its initial
    /// weights from its own stream so toggling the teeth submodule leaves the
    /// others unchanged.
    pub fn new<T: Real>(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.texture_channels;
        let dyntex = DynamicTexture::new(store, cfg.bases, cfg.transcoder_hidden, c, cfg.texture_size, &mut derive(cfg.seed, 1))?;
        let teeth = cfg
            .teeth
            .then(|| TeethNet::new(store, c, cfg.height, cfg.width, cfg.unet_width, cfg.unet_depth, &mut derive(cfg.seed, 2)));
        let render = RenderNet::new(store, cfg.face_channels(), cfg.unet_width, cfg.unet_depth, &mut derive(cfg.seed, 3));
        let decouple = DecoupleNets::new(store, &mut derive(cfg.seed, 4));
        let audio = AudioExpNet::new(store, &mut derive(cfg.seed, 5));
        Ok(Self { cfg: cfg.clone(), dyntex, teeth, render, decouple, audio })
    }

    /// Whether a parameter is trained end to end (texture, teeth, renderer).
    pub fn is_synthesis_param(name: &str) -> bool {
        ["dyntex.", "teeth.", "render."].iter().any(|p| name.starts_with(p))
    }

    /// Sampled (and teeth-completed) screen-space features for a batch.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, codes: Var, frames: &[FrameInput<T>]) -> Result<Var> {
        let tex = self.dyntex.dynamic_texture(tape, p, codes)?;
        self.features_from_texture(tape, p, tex, codes, frames)
    }

    /// As [`Model::features`] with the `B x C x S x S` texture given.
    pub fn features_from_texture<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        tex: Var,
        codes: Var,
        frames: &[FrameInput<T>],
    ) -> Result<Var> {
        let sampled = per_frame(tape, tex, frames.iter().map(|f| f.sampler.clone()))?;
        match &self.teeth {
            Some(t) => {
                let warps: Vec<TeethWarp<T>> = frames.iter().map(|f| f.teeth.clone()).collect();
                t.forward(tape, p, sampled, codes, &warps)
            }
            None => Ok(sampled),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, frames: &[FrameInput<T>]) -> Result<RenderVars> {
        if frames.is_empty() {
            return Err(shape_err_fmt!("empty batch"));
        }
        let codes: Vec<Ciec> = frames.iter().map(|f| f.ciec).collect();
        let codes = tape.constant(ciec_tensor(&codes));
        let fused = self.features(tape, p, codes, frames)?;
        let bg = stack(frames.iter().map(|f| &f.background))?;
        let bg = tape.constant(bg);
        self.render.forward(tape, p, fused, bg)
    }

    /// Frozen single-frame inference.
    pub fn render_frame<T: Real>(&self, store: &ParamStore<T>, input: &FrameInput<T>) -> Result<Rendered> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let out = self.forward(&mut tape, &p, core::slice::from_ref(input))?;
        Ok(Rendered::from_vars(&tape, out))
    }
}

/// Frozen inference split into the pipeline stages, one frame at a time.
/// Together they reproduce [`Model::render_frame`].
impl Model {
    /// Texture-space stage: blend weights and the `C x S x S` texture.
    pub fn stage_texture<T: Real>(&self, store: &ParamStore<T>, ciec: &Ciec) -> Result<(Vec<T>, Tensor<T>)> {
        let w = self.dyntex.weights_of(store, ciec)?;
        let tex = self.dyntex.blend_of(store, &w)?;
        Ok((w, tex))
    }

    /// Screen-space stage: deferred sampling and teeth completion.
    pub fn stage_features<T: Real>(&self, store: &ParamStore<T>, texture: &Tensor<T>, input: &FrameInput<T>) -> Result<Tensor<T>> {
        let mut s = texture.shape().to_vec();
        s.insert(0, 1);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let tex = tape.constant(texture.clone().reshape(&s)?);
        let codes = tape.constant(ciec_tensor(&[input.ciec]));
        let f = self.features_from_texture(&mut tape, &p, tex, codes, core::slice::from_ref(input))?;
        Ok(tape.value(f).clone())
    }

    /// Renderer and attention blend.
    pub fn stage_render<T: Real>(&self, store: &ParamStore<T>, features: &Tensor<T>, input: &FrameInput<T>) -> Result<Rendered> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let f = tape.constant(features.clone());
        let bg = input.background.clone();
        let mut s = bg.shape().to_vec();
        s.insert(0, 1);
        let bg = tape.constant(bg.reshape(&s)?);
        let out = self.render.forward(&mut tape, &p, f, bg)?;
        Ok(Rendered::from_vars(&tape, out))
    }
}

/// Output images of one frame, `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub image: Tensor<f32>,
    pub face: Tensor<f32>,
    pub alpha: Tensor<f32>,
}

impl Rendered {
    pub fn from_vars<T: Real>(tape: &Tape<T>, v: RenderVars) -> Self {
        let drop_batch = |x: Var| {
            let t = tape.value(x);
            let s = t.shape()[1..].to_vec();
            t.cast::<f32>().reshape(&s).expect("batch of one")
        };
        Self { image: drop_batch(v.composite), face: drop_batch(v.face), alpha: drop_batch(v.alpha) }
    }
}

/// Stacks `C x H x W` tensors into `B x C x H x W`.
pub fn stack<'a, T: Real + 'a>(items: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for t in items {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => return Err(shape_err_fmt!("cannot stack {:?} with {:?}", s, t.shape())),
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut s = shape.ok_or_else(|| shape_err_fmt!("stack of nothing"))?;
    s.insert(0, n);
    Tensor::from_vec(&s, data)
}

/// Everything a frame needs besides network weights: its code, the texture
/// sampler from rasterized UVs, the teeth warps and the masked background.
#[derive(Debug, Clone)]
pub struct FrameInput<T> {
    pub ciec: Ciec,
    pub sampler: Arc<ResamplePlan<T>>,
    pub teeth: TeethWarp<T>,
    /// `3 x H x W` with face and teeth pixels zeroed.
    pub background: Tensor<T>,
}

impl<T: Real> FrameInput<T> {
    /// `frame` is the reference frame whose background is kept.
    pub fn from_geometry(geom: &FrameGeometry, ciec: Ciec, frame: &Tensor<f32>, texture_size: usize) -> Result<Self> {
        let (h, w) = (geom.uvmap.height, geom.uvmap.width);
        if frame.shape() != [3, h, w] {
            return Err(shape_err_fmt!("reference frame {:?} does not match {}x{}", frame.shape(), h, w));
        }
        let sampler = Arc::new(texture_sampler(&geom.uvmap, texture_size, texture_size)?);
        let teeth = TeethWarp::from_mask(&geom.teeth_mask, h, w)?;
        let background = mask_background(frame, &geom.face_mask, &geom.teeth_mask)?.cast();
        Ok(Self { ciec, sampler, teeth, background })
    }

    pub fn prepare(
        basis: &BlendshapeBasis,
        camera: &Camera,
        params: &FaceParams,
        ciec: Ciec,
        frame: &Tensor<f32>,
        texture_size: usize,
    ) -> Result<Self> {
        let geom = FrameGeometry::new(basis, params, camera)?;
        Self::from_geometry(&geom, ciec, frame, texture_size)
    }

    pub fn cast<U: Real>(&self) -> FrameInput<U> {
        FrameInput {
            ciec: self.ciec,
            sampler: Arc::new(self.sampler.cast()),
            teeth: self.teeth.cast(),
            background: self.background.cast(),
        }
    }
}

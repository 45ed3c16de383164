//! Frame-by-frame synthesis from a loaded model, timed per stage. Shared by
//! `synthesize`, `bench` and the live server.

use std::time::Instant;

use dntx_core::audio_exp::AudioState;
use dntx_core::ciec::Ciec;
use dntx_core::face::{BlendshapeBasis, FaceParams};
use dntx_core::pipeline::FrameInput;
use dntx_core::raster::Camera;
use dntx_core::synth::{row, ClipRecord, AUDIO_DIM};
use dntx_core::Tensor;

use crate::checkpoint::LoadedModel;
use crate::error::{Error, Result};

/// Pipeline stages in execution order.
pub const STAGES: [&str; 6] = ["dyntex", "audio_exp", "decouple", "raster", "teeth", "render"];

/// Per-frame driving signals: audio features, head pose and the reference
/// frames whose backgrounds are kept.
#[derive(Debug, Clone)]
pub struct Drive {
    pub audio: Tensor<f32>,
    pub pose: Tensor<f32>,
    pub backgrounds: Vec<Tensor<f32>>,
}

impl Drive {
    pub fn from_clip(clip: &ClipRecord) -> Self {
        Self { audio: clip.audio_features.clone(), pose: clip.pose_seq.clone(), backgrounds: clip.frames.clone() }
    }

    pub fn new(audio: Tensor<f32>, pose: Option<Tensor<f32>>, backgrounds: Vec<Tensor<f32>>) -> Result<Self> {
        let s = audio.shape().to_vec();
        if s.len() != 2 || s[1] != AUDIO_DIM || s[0] == 0 {
            return Err(Error::Config(format!("audio features must be T x {AUDIO_DIM}, got {s:?}")));
        }
        let pose = pose.unwrap_or_else(|| Tensor::zeros(&[s[0], 6]));
        if pose.shape() != [s[0], 6] {
            return Err(Error::Config(format!("pose must be {} x 6, got {:?}", s[0], pose.shape())));
        }
        if backgrounds.is_empty() {
            return Err(Error::Config("at least one background frame is needed".into()));
        }
        Ok(Self { audio, pose, backgrounds })
    }

    pub fn len(&self) -> usize {
        self.audio.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn background(&self, t: usize) -> &Tensor<f32> {
        &self.backgrounds[t.min(self.backgrounds.len() - 1)]
    }
}

/// Recurrent audio state and the frame it is positioned at.
#[derive(Debug, Clone, Default)]
pub struct AudioCursor {
    state: Option<AudioState<f32>>,
    next: usize,
}

#[derive(Debug, Clone)]
pub struct FrameOut {
    pub frame: usize,
    pub ciec: Ciec,
    pub weights: Vec<f32>,
    pub texture: Tensor<f32>,
    pub beta: Vec<f64>,
    pub image: Tensor<f32>,
    /// Milliseconds per entry of [`STAGES`].
    pub stage_ms: [f64; 6],
}

impl FrameOut {
    pub fn total_ms(&self) -> f64 {
        self.stage_ms.iter().sum()
    }
}

pub struct Engine {
    pub loaded: LoadedModel,
    pub basis: BlendshapeBasis,
    pub camera: Camera,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Engine {
    pub fn new(loaded: LoadedModel) -> Result<Self> {
        let d = &loaded.snapshot.dataset;
        let m = &loaded.model.cfg;
        if (d.height, d.width) != (m.height, m.width) {
            return Err(Error::Config(format!("checkpoint geometry {}x{} does not match its model {}x{}", d.height, d.width, m.height, m.width)));
        }
        let basis = d.basis()?;
        let camera = d.camera()?;
        Ok(Self { loaded, basis, camera })
    }

    pub fn check_drive(&self, drive: &Drive) -> Result<()> {
        let (h, w) = (self.loaded.model.cfg.height, self.loaded.model.cfg.width);
        match drive.backgrounds.iter().find(|b| b.shape() != [3, h, w]) {
            Some(b) => Err(Error::Config(format!("background {:?} does not match the model's 3 x {h} x {w}", b.shape()))),
            None => Ok(()),
        }
    }

    /// Renders frame `t` of `drive` under `ciec`. The audio cursor replays
    /// from the start when `t` is not the frame after the previous call.
    pub fn render(&self, drive: &Drive, cursor: &mut AudioCursor, t: usize, ciec: Ciec) -> Result<FrameOut> {
        self.render_inner(drive, cursor, t, ciec).map_err(|e| Error::Frame { frame: t, source: Box::new(e) })
    }

    fn render_inner(&self, drive: &Drive, cursor: &mut AudioCursor, t: usize, ciec: Ciec) -> Result<FrameOut> {
        if t >= drive.len() {
            return Err(Error::Config(format!("frame {t} is past the {} driving frames", drive.len())));
        }
        let (model, store) = (&self.loaded.model, &self.loaded.store);
        let mut stage_ms = [0.0; 6];

        let clock = Instant::now();
        let (weights, texture) = model.stage_texture(store, &ciec)?;
        stage_ms[0] = ms(clock);

        let clock = Instant::now();
        if cursor.next != t {
            *cursor = AudioCursor::default();
            for s in 0..t {
                let (_, st) = model.audio.step(store, &row(&drive.audio, s), &ciec, cursor.state.as_ref())?;
                cursor.state = Some(st);
            }
        }
        let (beta, st) = model.audio.step(store, &row(&drive.audio, t), &ciec, cursor.state.as_ref())?;
        cursor.state = Some(st);
        cursor.next = t + 1;
        stage_ms[1] = ms(clock);

        let clock = Instant::now();
        let neutral = model.decouple.decouple(store, &beta)?;
        stage_ms[2] = ms(clock);

        let clock = Instant::now();
        let p = row(&drive.pose, t);
        let params = FaceParams { pose: [p[0], p[1], p[2], p[3], p[4], p[5]], ..FaceParams::with_beta(&neutral) };
        let input = FrameInput::prepare(&self.basis, &self.camera, &params, ciec, drive.background(t), model.cfg.texture_size)?;
        stage_ms[3] = ms(clock);

        let clock = Instant::now();
        let features = model.stage_features(store, &texture, &input)?;
        stage_ms[4] = ms(clock);

        let clock = Instant::now();
        let out = model.stage_render(store, &features, &input)?;
        stage_ms[5] = ms(clock);

        if out.image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("rendered frame has non-finite pixels".into()));
        }
        Ok(FrameOut { frame: t, ciec, weights, texture, beta, image: out.image, stage_ms })
    }
}

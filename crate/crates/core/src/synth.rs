//! Synthetic talking-face clips: speech-driven geometry, expression-bearing
//! texture, procedural backgrounds and correlated audio features.
//!
//! Geometry, pose, background and audio depend only on the clip's slot
//! index, never on its expression label, so every expression difference
//! between clips lives in the texture.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::ciec::{Ciec, ExpressionType};
use crate::face::{
    appearance_at, build_mesh, ground_truth_appearance, vertex_colors, BlendshapeBasis, FaceParams,
    Mesh, BETA_JAW, BETA_SMILE, N_BETA,
};
use crate::raster::{project_region_mask, rasterize_uv, texture_sampler, Camera, Region, UvScreenMap};
use crate::rng::{derive, normal, uniform, SeededRng};
use crate::{Error, Result, Tensor};

pub const AUDIO_DIM: usize = 16;

/// Fraction of each clip (from its start) used for training.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Non-neutral expression types to generate.
    pub types: Vec<ExpressionType>,
    pub levels: Vec<u8>,
    pub clips_per_label: usize,
    pub neutral_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub texture_size: usize,
    pub vertices: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            types: ExpressionType::EXPRESSIVE.to_vec(),
            levels: vec![1, 2, 3],
            clips_per_label: 1,
            neutral_clips: 1,
            frames: 20,
            height: 64,
            width: 64,
            texture_size: 64,
            vertices: crate::face::DEFAULT_VERTICES,
            fps: 20.0,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("zero frames requested".into()));
        }
        if self.types.contains(&ExpressionType::Neutral) {
            return Err(Error::Config("neutral clips are configured by `neutral_clips`".into()));
        }
        if let Some(l) = self.levels.iter().find(|l| !(1..=3).contains(*l)) {
            return Err(Error::Level(*l));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if !(8..=256).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [8, 256]")));
            }
        }
        if !(4..=256).contains(&self.texture_size) {
            return Err(Error::Config(format!("texture_size {} outside [4, 256]", self.texture_size)));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }

    /// Every clip's label and slot, in a stable order.
    pub fn clip_specs(&self) -> Vec<ClipSpec> {
        let mut specs = Vec::new();
        for slot in 0..self.neutral_clips {
            specs.push(ClipSpec { expression: ExpressionType::Neutral, level: 0, slot });
        }
        for &ty in &self.types {
            for &level in &self.levels {
                for slot in 0..self.clips_per_label {
                    specs.push(ClipSpec { expression: ty, level, slot });
                }
            }
        }
        specs
    }

    pub fn camera(&self) -> Result<Camera> {
        Camera::default_for(self.height, self.width)
    }

    pub fn basis(&self) -> Result<BlendshapeBasis> {
        BlendshapeBasis::build(self.seed, self.vertices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipSpec {
    pub expression: ExpressionType,
    pub level: u8,
    pub slot: usize,
}

impl ClipSpec {
    pub fn id(&self) -> String {
        format!("{}_l{}_s{:02}", self.expression.name(), self.level, self.slot)
    }

    pub fn ciec(&self) -> Ciec {
        Ciec::from_label(self.expression, self.level).expect("specs are built from valid labels")
    }

    pub fn intensity(&self) -> f64 {
        self.ciec().intensity()
    }
}

/// One generated clip. Per-frame images are `3 x H x W` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub expression: ExpressionType,
    pub level: u8,
    pub slot: usize,
    pub seed: u64,
    pub frames: Vec<Tensor<f32>>,
    /// `T x 64`.
    pub beta_seq: Tensor<f32>,
    /// `T x 6`.
    pub pose_seq: Tensor<f32>,
    /// `T x 16`.
    pub audio_features: Tensor<f32>,
}

impl ClipRecord {
    pub fn len(&self) -> usize {
        self.beta_seq.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ciec(&self) -> Ciec {
        Ciec::from_label(self.expression, self.level).unwrap_or(Ciec::NEUTRAL)
    }

    pub fn beta(&self, t: usize) -> Vec<f64> {
        row(&self.beta_seq, t)
    }

    pub fn pose(&self, t: usize) -> [f64; 6] {
        let r = row(&self.pose_seq, t);
        [r[0], r[1], r[2], r[3], r[4], r[5]]
    }

    pub fn params(&self, t: usize) -> FaceParams {
        FaceParams { pose: self.pose(t), ..FaceParams::with_beta(&self.beta(t)) }
    }

    /// First frame index of the held-out tail.
    pub fn split_index(&self) -> usize {
        split_index(self.len())
    }
}

pub fn split_index(len: usize) -> usize {
    let b = (TRAIN_FRACTION * len as f64).ceil() as usize;
    b.min(len)
}

pub fn row(t: &Tensor<f32>, i: usize) -> Vec<f64> {
    let w = t.shape()[1];
    t.data()[i * w..(i + 1) * w].iter().map(|&v| v as f64).collect()
}

/// AR(1) sequence with unit stationary variance.
fn ar1(rng: &mut SeededRng, n: usize, rho: f64) -> Vec<f64> {
    let s = (1.0 - rho * rho).sqrt();
    let mut x = normal(rng);
    (0..n)
        .map(|_| {
            let out = x;
            x = rho * x + s * normal(rng);
            out
        })
        .collect()
}

/// Speech-driven coefficients, pose and audio features for a slot.
pub fn speech_signals(seed: u64, slot: usize, frames: usize, fps: f64) -> (Vec<Vec<f64>>, Vec<[f64; 6]>, Vec<Vec<f64>>) {
    let mut rng = derive(seed, 0x5EEC_0000 + slot as u64);
    let f = uniform(&mut rng, 2.0, 3.5);
    let w = 2.0 * PI * f / fps;
    let phase = uniform(&mut rng, 0.0, 2.0 * PI);
    let w1 = w * uniform(&mut rng, 0.4, 0.8);
    let phase1 = uniform(&mut rng, 0.0, 2.0 * PI);
    let jaw_noise = ar1(&mut rng, frames, 0.6);
    let rest: Vec<Vec<f64>> = (3..N_BETA).map(|_| ar1(&mut rng, frames, 0.8)).collect();
    let pose_ph: Vec<f64> = (0..5).map(|_| uniform(&mut rng, 0.0, 2.0 * PI)).collect();
    let pose_w = 2.0 * PI * 0.4 / fps;

    let mut betas = Vec::with_capacity(frames);
    let mut poses = Vec::with_capacity(frames);
    for t in 0..frames {
        let tt = t as f64;
        let mut b = vec![0.0; N_BETA];
        b[BETA_JAW] = (0.5 + 0.45 * (w * tt + phase).sin() + 0.12 * jaw_noise[t]).clamp(0.0, 1.0);
        b[BETA_SMILE] = 0.25 * (w1 * tt + phase1).sin();
        for (k, r) in rest.iter().enumerate() {
            b[k + 3] = 0.3 * r[t];
        }
        betas.push(b);
        let s = |i: usize, a: f64| a * (pose_w * tt + pose_ph[i]).sin();
        poses.push([s(0, 0.04), s(1, 0.06), s(2, 0.02), s(3, 0.03), s(4, 0.02), 0.0]);
    }

    let mut arng = derive(seed, 0xA0D1_0000 + slot as u64);
    let noise: Vec<Vec<f64>> = (2..AUDIO_DIM).map(|_| ar1(&mut arng, frames, 0.5)).collect();
    let audio = (0..frames)
        .map(|t| {
            let mut a = vec![0.0; AUDIO_DIM];
            a[0] = betas[t][BETA_JAW] + 0.05 * normal(&mut arng);
            a[1] = betas[t][BETA_SMILE] + 0.05 * normal(&mut arng);
            for c in 2..AUDIO_DIM {
                a[c] = 0.5 * betas[t][c + 1] + 0.5 * noise[c - 2][t];
            }
            a
        })
        .collect();
    (betas, poses, audio)
}

fn to_tensor(rows: &[Vec<f64>], width: usize) -> Tensor<f32> {
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    Tensor::from_vec(&[rows.len(), width], data).expect("rectangular")
}

/// Static per-slot background, `3 x H x W`.
pub fn background(seed: u64, slot: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = derive(seed, 0xBAC6_0000 + slot as u64);
    let base: Vec<f64> = (0..3).map(|_| uniform(&mut rng, 0.15, 0.6)).collect();
    let gx: Vec<f64> = (0..3).map(|_| uniform(&mut rng, -0.2, 0.2)).collect();
    let gy: Vec<f64> = (0..3).map(|_| uniform(&mut rng, -0.2, 0.2)).collect();
    let (fx, fy, ph) = (uniform(&mut rng, 1.0, 3.0), uniform(&mut rng, 1.0, 3.0), uniform(&mut rng, 0.0, 6.0));
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let wave = 0.06 * (PI * (fx * u + fy * v) + ph).sin();
            for c in 0..3 {
                let val = base[c] + gx[c] * (u - 0.5) + gy[c] * (v - 0.5) + wave;
                data[(c * h + y) * w + x] = val.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized")
}

/// Rasterized geometry of one frame.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    pub mesh: Mesh,
    pub uvmap: UvScreenMap,
    pub face_mask: Vec<bool>,
    pub teeth_mask: Vec<bool>,
}

impl FrameGeometry {
    pub fn new(basis: &BlendshapeBasis, params: &FaceParams, camera: &Camera) -> Result<Self> {
        let mesh = build_mesh(basis, params)?;
        let uvmap = rasterize_uv(&mesh, camera);
        let face_mask = uvmap.coverage.clone();
        let teeth_mask = project_region_mask(&mesh, camera, &Region::Teeth(basis.teeth_anchor_ids.clone()));
        Ok(Self { mesh, uvmap, face_mask, teeth_mask })
    }

    /// Mouth-interior pixels the face mesh leaves uncovered.
    pub fn mouth_interior(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.face_mask.len()).filter(|&i| self.teeth_mask[i] && !self.face_mask[i])
    }
}

/// Procedural teeth and mouth-interior color at pixel `(x, y)` given the
/// teeth-region centroid.
pub fn teeth_color(x: f64, y: f64, cx: f64, cy: f64) -> [f64; 3] {
    if y < cy + 0.5 {
        let g = 0.86 + 0.1 * (2.0 * PI * (x - cx) / 3.0).cos();
        [g, g, 0.95 * g]
    } else {
        [0.42, 0.14, 0.16]
    }
}

fn mask_centroid(mask: &[bool], w: usize) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        sx += (i % w) as f64 + 0.5;
        sy += (i / w) as f64 + 0.5;
        n += 1;
    }
    (n > 0).then(|| (sx / n as f64, sy / n as f64))
}

/// Ground-truth frame: background, textured face, and teeth inside the
/// uncovered mouth opening.
pub fn render_gt_frame(geom: &FrameGeometry, texture: &Tensor<f32>, bg: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = (geom.uvmap.height, geom.uvmap.width);
    let ts = texture.shape();
    let plan = texture_sampler::<f32>(&geom.uvmap, ts[1], ts[2])?;
    let mut face = vec![0.0f32; 3 * h * w];
    plan.apply(texture.data(), &mut face);
    let mut out = bg.clone();
    let d = out.data_mut();
    let hw = h * w;
    for i in (0..hw).filter(|&i| geom.face_mask[i]) {
        for c in 0..3 {
            d[c * hw + i] = face[c * hw + i];
        }
    }
    if let Some((cx, cy)) = mask_centroid(&geom.teeth_mask, w) {
        for i in geom.mouth_interior() {
            let col = teeth_color((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, cx, cy);
            for c in 0..3 {
                d[c * hw + i] = col[c] as f32;
            }
        }
    }
    Ok(out)
}

/// Gray Lambert-shaded render on black.
pub fn render_shaded(geom: &FrameGeometry) -> Tensor<f32> {
    let l = [0.3, 0.4, 0.866];
    let shade: Vec<f64> = geom
        .mesh
        .normals
        .iter()
        .map(|n| 0.2 + 0.7 * (n[0] * l[0] + n[1] * l[1] + n[2] * l[2]).max(0.0))
        .collect();
    let cols: Vec<[f64; 3]> = shade.iter().map(|&s| [s, s, s]).collect();
    interpolate_vertex_colors(geom, &cols)
}

/// Per-vertex colored render on black.
pub fn render_vertex_colored(geom: &FrameGeometry, ty: ExpressionType, intensity: f64) -> Tensor<f32> {
    let cols = vertex_colors(&geom.mesh.topology, ty, intensity);
    interpolate_vertex_colors(geom, &cols)
}

fn interpolate_vertex_colors(geom: &FrameGeometry, cols: &[[f64; 3]]) -> Tensor<f32> {
    let m = &geom.uvmap;
    let hw = m.height * m.width;
    let mut data = vec![0.0f32; 3 * hw];
    for i in (0..hw).filter(|&i| m.coverage[i]) {
        let t = geom.mesh.topology.triangles[m.triangle[i] as usize];
        let b = m.bary[i];
        for c in 0..3 {
            let v: f64 = (0..3).map(|k| b[k] * cols[t[k] as usize][c]).sum();
            data[c * hw + i] = v as f32;
        }
    }
    Tensor::from_vec(&[3, m.height, m.width], data).expect("sized")
}

/// Textured render on black (no background, no teeth).
pub fn render_textured(geom: &FrameGeometry, texture: &Tensor<f32>) -> Result<Tensor<f32>> {
    let ts = texture.shape();
    let plan = texture_sampler::<f32>(&geom.uvmap, ts[1], ts[2])?;
    let (h, w) = (geom.uvmap.height, geom.uvmap.width);
    let mut out = vec![0.0f32; 3 * h * w];
    plan.apply(texture.data(), &mut out);
    Tensor::from_vec(&[3, h, w], out)
}

/// Generates one clip.
pub fn generate_clip(cfg: &DatasetConfig, basis: &BlendshapeBasis, spec: ClipSpec) -> Result<ClipRecord> {
    cfg.validate()?;
    let camera = cfg.camera()?;
    let (betas, poses, audio) = speech_signals(cfg.seed, spec.slot, cfg.frames, cfg.fps);
    let beta_seq = to_tensor(&betas, N_BETA);
    let pose_rows: Vec<Vec<f64>> = poses.iter().map(|p| p.to_vec()).collect();
    let pose_seq = to_tensor(&pose_rows, 6);
    let texture = ground_truth_appearance(spec.expression, spec.intensity(), cfg.texture_size, cfg.texture_size)?;
    let bg = background(cfg.seed, spec.slot, cfg.height, cfg.width);
    let mut rec = ClipRecord {
        id: spec.id(),
        expression: spec.expression,
        level: spec.level,
        slot: spec.slot,
        seed: cfg.seed,
        frames: Vec::with_capacity(cfg.frames),
        beta_seq,
        pose_seq,
        audio_features: to_tensor(&audio, AUDIO_DIM),
    };
    for t in 0..cfg.frames {
        // geometry is rebuilt from the stored single-precision coefficients
        let geom = FrameGeometry::new(basis, &rec.params(t), &camera)?;
        rec.frames.push(render_gt_frame(&geom, &texture, &bg)?);
    }
    Ok(rec)
}

/// Generates every clip of the configuration in [`DatasetConfig::clip_specs`]
/// order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<ClipRecord>> {
    cfg.validate()?;
    let basis = cfg.basis()?;
    cfg.clip_specs().into_iter().map(|s| generate_clip(cfg, &basis, s)).collect()
}

/// Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Ground-truth texture of a clip's label.
pub fn clip_texture(rec: &ClipRecord, size: usize) -> Result<Tensor<f32>> {
    ground_truth_appearance(rec.expression, rec.ciec().intensity(), size, size)
}

/// Appearance lookup re-exported for renderers that evaluate colors directly.
pub fn appearance(ty: ExpressionType, intensity: f64, u: f64, v: f64) -> [f64; 3] {
    appearance_at(ty, intensity, u, v)
}

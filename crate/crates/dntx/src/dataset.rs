//! On-disk dataset: `manifest.json` at the root and one directory per clip
//! under `clips/` holding `frame_%04d.png`, `labels.json` and
//! `features.bin` (a `.dntc` container).

use std::path::{Path, PathBuf};

use dntx_core::ciec::ExpressionType;
use dntx_core::synth::{split_index, ClipRecord, DatasetConfig, TRAIN_FRACTION};
use dntx_core::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub id: String,
    pub frames: usize,
    /// First held-out frame.
    pub split_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub train_fraction: f64,
    pub clips: Vec<ClipEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Labels {
    pub id: String,
    #[serde(rename = "type")]
    pub expression: ExpressionType,
    pub level: u8,
    pub slot: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<ClipRecord>,
}

pub fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

/// `3 x H x W` in `[0, 1]` to an 8-bit image.
pub fn to_png(img: &Tensor<f32>) -> Result<RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dataset(format!("expected a 3 x H x W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([q(d[i]), q(d[h * w + i]), q(d[2 * h * w + i])])
    }))
}

pub fn from_png(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized")
}

pub fn write_png(path: &Path, img: &Tensor<f32>) -> Result<()> {
    to_png(img)?.save(path).map_err(|e| Error::Io { path: path.into(), source: std::io::Error::other(e) })
}

pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Io { path: path.into(), source: std::io::Error::other(e) })?;
    Ok(from_png(&img.to_rgb8()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).expect("serializable");
    std::fs::write(path, s).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&s).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

pub fn clip_dir(root: &Path, id: &str) -> PathBuf {
    root.join("clips").join(id)
}

pub fn write_dataset(root: &Path, cfg: &DatasetConfig, clips: &[ClipRecord]) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        let dir = clip_dir(root, &clip.id);
        std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for (t, f) in clip.frames.iter().enumerate() {
            write_png(&dir.join(frame_name(t)), f)?;
        }
        let labels = Labels { id: clip.id.clone(), expression: clip.expression, level: clip.level, slot: clip.slot, seed: clip.seed };
        write_json(&dir.join("labels.json"), &labels)?;
        let mut feats = Checkpoint::new(serde_json::json!({ "clip": clip.id }));
        feats.push("beta_seq", clip.beta_seq.clone());
        feats.push("audio_features", clip.audio_features.clone());
        feats.push("pose_seq", clip.pose_seq.clone());
        feats.save(&dir.join("features.bin"))?;
        entries.push(ClipEntry { id: clip.id.clone(), frames: clip.len(), split_index: split_index(clip.len()) });
    }
    let manifest = DatasetManifest { format_version: DATASET_VERSION, config: cfg.clone(), train_fraction: TRAIN_FRACTION, clips: entries };
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let m: DatasetManifest = read_json(&root.join("manifest.json"))?;
    if m.format_version != DATASET_VERSION {
        return Err(Error::Dataset(format!("dataset format version {} is not supported", m.format_version)));
    }
    Ok(m)
}

pub fn read_clip(root: &Path, entry: &ClipEntry) -> Result<ClipRecord> {
    let dir = clip_dir(root, &entry.id);
    let labels: Labels = read_json(&dir.join("labels.json"))?;
    if labels.id != entry.id {
        return Err(Error::Dataset(format!("labels of {} name clip {}", entry.id, labels.id)));
    }
    let feats = Checkpoint::load(&dir.join("features.bin"))?;
    let take = |name: &str| {
        feats.get(name).cloned().ok_or_else(|| Error::Dataset(format!("{}: features.bin lacks {name}", entry.id)))
    };
    let (beta_seq, audio_features, pose_seq) = (take("beta_seq")?, take("audio_features")?, take("pose_seq")?);
    for (name, t) in [("beta_seq", &beta_seq), ("audio_features", &audio_features), ("pose_seq", &pose_seq)] {
        if t.shape().first() != Some(&entry.frames) {
            return Err(Error::Dataset(format!("{}: {name} has shape {:?} for {} frames", entry.id, t.shape(), entry.frames)));
        }
    }
    if entry.split_index != split_index(entry.frames) {
        return Err(Error::Dataset(format!("{}: split index {} disagrees with {} frames", entry.id, entry.split_index, entry.frames)));
    }
    let frames = (0..entry.frames).map(|t| read_png(&dir.join(frame_name(t)))).collect::<Result<Vec<_>>>()?;
    Ok(ClipRecord {
        id: labels.id,
        expression: labels.expression,
        level: labels.level,
        slot: labels.slot,
        seed: labels.seed,
        frames,
        beta_seq,
        pose_seq,
        audio_features,
    })
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let clips = manifest.clips.iter().map(|e| read_clip(root, e)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, clips })
}

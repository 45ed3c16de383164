//! Image and landmark metrics, expression classifiers, the texture-versus-
//! geometry evidence experiment and the perceptual intensity score.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ciec::NUM_TYPES;
use crate::face::{build_mesh, face_landmarks, BlendshapeBasis, FaceParams};
use crate::nn::{Adam, AdamConfig, Bound, Conv, Linear, ParamStore};
use crate::pipeline::{stack, FrameInput, Model};
use crate::raster::Camera;
use crate::rng::{derive, mix, SeededRng};
use crate::synth::{clip_texture, render_shaded, render_textured, render_vertex_colored, ClipRecord, FrameGeometry};
use crate::tape::{Tape, Var};
use crate::train::{render_batch, Split};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

/// `10 log10(peak^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(shape_err_fmt!("psnr of {:?} and {:?}", a.shape(), b.shape()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over the valid region of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = alloc::vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..k).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..k).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean structural similarity of `C x H x W` images in `[0, 1]`: 11x11
/// Gaussian window, valid region, averaged over channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let s = a.shape();
    if s != b.shape() || s.len() != 3 {
        return Err(shape_err_fmt!("ssim of {:?} and {:?}", s, b.shape()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(shape_err_fmt!("ssim needs at least {0}x{0} images, got {1}x{2}", SSIM_WINDOW, h, w));
    }
    let g = gaussian_window();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.data()[ch * n..(ch + 1) * n].iter().map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter_valid(&x, h, w, &g), filter_valid(&y, h, w, &g));
        let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &g), filter_valid(&yy, h, w, &g), filter_valid(&xy, h, w, &g));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
            let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
            acc += num / den;
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Which landmarks enter the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkSubset {
    /// The 20 mouth points, indices 48..68 of the 68-point layout.
    Mouth20,
    Face68,
}

impl LandmarkSubset {
    pub fn range(self) -> core::ops::Range<usize> {
        match self {
            LandmarkSubset::Mouth20 => 48..68,
            LandmarkSubset::Face68 => 0..68,
        }
    }
}

/// Outer eye corners in the 68-point layout.
pub const EYE_CORNERS: (usize, usize) = (36, 45);

/// Mean Euclidean distance over the subset, divided by the inter-ocular
/// distance of `a`. Both sets use the 68-point layout.
pub fn lmd(a: &[[f64; 2]], b: &[[f64; 2]], subset: LandmarkSubset) -> Result<f64> {
    if a.len() != 68 || b.len() != 68 {
        return Err(shape_err_fmt!("landmark distance needs two 68-point sets, got {} and {}", a.len(), b.len()));
    }
    let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let iod = d(a[EYE_CORNERS.0], a[EYE_CORNERS.1]);
    if !(iod > 0.0) {
        return Err(Error::Degenerate("inter-ocular distance is zero".into()));
    }
    let r = subset.range();
    let n = r.len() as f64;
    Ok(r.map(|i| d(a[i], b[i])).sum::<f64>() / n / iod)
}

/// Projects the 68 landmarks of a posed face to pixel coordinates.
pub fn projected_landmarks(basis: &BlendshapeBasis, params: &FaceParams, camera: &Camera) -> Result<Vec<[f64; 2]>> {
    let mesh = build_mesh(basis, params)?;
    Ok(face_landmarks(&mesh, basis)
        .into_iter()
        .map(|p| {
            let q = camera.project(p);
            [q[0], q[1]]
        })
        .collect())
}

/// A participant's ordering of `m` stimuli: a permutation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderMatrix {
    m: usize,
    data: Vec<f64>,
}

impl OrderMatrix {
    /// Validates that `rows` is a square 0/1 matrix with one 1 per row and column.
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(shape_err_fmt!("order matrix must be square and non-empty"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config("order matrix entries must be 0 or 1".into()));
        }
        let row_ok = (0..m).all(|i| data[i * m..(i + 1) * m].iter().sum::<f64>() == 1.0);
        let col_ok = (0..m).all(|j| (0..m).map(|i| data[i * m + j]).sum::<f64>() == 1.0);
        if !row_ok || !col_ok {
            return Err(Error::Config("order matrix is not a permutation".into()));
        }
        Ok(Self { m, data })
    }

    /// Row `i` has its 1 in column `perm[i]`.
    pub fn from_permutation(perm: &[usize]) -> Result<Self> {
        let m = perm.len();
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&j| (0..m).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(&rows)
    }

    pub fn identity(m: usize) -> Self {
        Self::from_permutation(&(0..m).collect::<Vec<_>>()).expect("identity is a permutation")
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }
}

/// Average of the participants' order matrices; doubly stochastic.
pub fn mean_order_matrix(ms: &[OrderMatrix]) -> Result<Vec<Vec<f64>>> {
    let m = ms.first().ok_or_else(|| Error::Degenerate("no order matrices".into()))?.m;
    if ms.iter().any(|o| o.m != m) {
        return Err(shape_err_fmt!("order matrices of different sizes"));
    }
    let k = ms.len() as f64;
    Ok((0..m).map(|i| (0..m).map(|j| ms.iter().map(|o| o.get(i, j)).sum::<f64>() / k).collect()).collect())
}

/// `s = M x` with `M` the mean order matrix and `x` the ascending sampled
/// intensities.
pub fn perceptual_intensity_score(ms: &[OrderMatrix], x: &[f64]) -> Result<Vec<f64>> {
    let mean = mean_order_matrix(ms)?;
    if mean.len() != x.len() {
        return Err(shape_err_fmt!("{} intensities for {}x{} order matrices", x.len(), mean.len(), mean.len()));
    }
    if x.iter().any(|v| !(0.0..=1.0).contains(v)) || x.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("intensities must be ascending within [0, 1]".into()));
    }
    Ok(mean.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Channels of the stride-2 conv blocks.
    pub widths: Vec<usize>,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { widths: vec![8, 16, 32, 32], max_epochs: 50, batch_size: 8, learning_rate: 1e-3, patience: 20, seed: 23 }
    }
}

/// Stride-2 conv blocks and a linear head on the flattened final map.
#[derive(Debug, Clone)]
pub struct ExpressionClassifier {
    convs: Vec<Conv>,
    head: Linear,
    classes: usize,
    store: ParamStore<f32>,
}

impl ExpressionClassifier {
    pub fn new(input: [usize; 3], classes: usize, cfg: &ClassifierConfig) -> Result<Self> {
        let [c_in, mut h, mut w] = input;
        if cfg.widths.is_empty() || cfg.widths.contains(&0) || classes < 2 {
            return Err(Error::Config("classifier needs non-empty widths and two or more classes".into()));
        }
        let mut rng = derive(cfg.seed, 0xC1A5);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut c = c_in;
        for (i, &width) in cfg.widths.iter().enumerate() {
            convs.push(Conv::new(&mut store, &format!("cls.conv{i}"), c, width, 3, 2, &mut rng));
            c = width;
            h = (h - 1) / 2 + 1;
            w = (w - 1) / 2 + 1;
        }
        let head = Linear::new(&mut store, "cls.head", c * h * w, classes, true, &mut rng);
        // uniform predictions at initialization
        store.get_mut(head.w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(Self { convs, head, classes, store })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    fn logits(&self, tape: &mut Tape<f32>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = tape.add_scalar(x, -0.5);
        for conv in &self.convs {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, 0.1);
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[s[0], s[1] * s[2] * s[3]])?;
        self.head.forward(tape, p, flat)
    }

    /// Mean cross-entropy over labelled images.
    pub fn cross_entropy(&self, images: &[&Tensor<f32>], labels: &[usize]) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(shape_err_fmt!("{} images with {} labels", images.len(), labels.len()));
        }
        let mut total = 0.0;
        for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &self.store, false);
            let x = tape.constant(stack(chunk.iter().copied())?);
            let z = self.logits(&mut tape, &p, x)?;
            let ce = tape.cross_entropy(z, lab)?;
            total += tape.scalar(ce) as f64 * chunk.len() as f64;
        }
        Ok(total / images.len() as f64)
    }

    /// Class probabilities, one row per image.
    pub fn predict(&self, images: &[&Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &self.store, false);
            let x = tape.constant(stack(chunk.iter().copied())?);
            let z = self.logits(&mut tape, &p, x)?;
            for row in tape.value(z).data().chunks(self.classes) {
                let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
                let z: f64 = e.iter().sum();
                out.push(e.into_iter().map(|v| v / z).collect());
            }
        }
        Ok(out)
    }
}

/// A trained classifier and its cross-entropy on the held-out groups.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: ExpressionClassifier,
    pub heldout_ce: f64,
    pub epochs: usize,
    /// Mean training loss and held-out CE per epoch.
    pub history: Vec<(f64, f64)>,
}

/// Splits groups into training and held-out sets: for every label with two
/// or more groups, one of them is held out. Falls back to the last fifth of
/// each group's items when no label has a spare group.
fn holdout_split(labels: &[usize], groups: &[usize], rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
    let mut by_label: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for (&l, &g) in labels.iter().zip(groups) {
        by_label.entry(l).or_default().insert(g);
    }
    let mut held = BTreeSet::new();
    for gs in by_label.values() {
        if gs.len() >= 2 {
            let v: Vec<usize> = gs.iter().copied().collect();
            held.insert(*v.choose(rng).expect("non-empty"));
        }
    }
    let idx = 0..labels.len();
    if !held.is_empty() {
        return idx.partition(|&i| !held.contains(&groups[i]));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in idx {
        members.entry(groups[i]).or_default().push(i);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for m in members.values() {
        let cut = m.len() - m.len() / 5;
        train.extend_from_slice(&m[..cut]);
        val.extend_from_slice(&m[cut..]);
    }
    (train, val)
}

/// Trains a classifier with early stopping on held-out groups; keeps the
/// weights of the best held-out epoch. Labels index `0..classes`.
pub fn train_expression_classifier(
    images: &[&Tensor<f32>],
    labels: &[usize],
    groups: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    if images.len() != labels.len() || images.len() != groups.len() {
        return Err(shape_err_fmt!("{} images, {} labels, {} groups", images.len(), labels.len(), groups.len()));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Config(format!("label outside 0..{classes}")));
    }
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(Error::Degenerate("classifier needs at least two classes".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("classifier batch size, epochs and learning rate must be positive".into()));
    }
    let s = images[0].shape();
    if s.len() != 3 || images.iter().any(|x| x.shape() != s) {
        return Err(shape_err_fmt!("classifier images must share one C x H x W shape"));
    }
    let mut model = ExpressionClassifier::new([s[0], s[1], s[2]], classes, cfg)?;
    let mut rng = derive(cfg.seed, 0xC1A6);
    let (mut train, val) = holdout_split(labels, groups, &mut rng);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Degenerate("not enough data for a held-out split".into()));
    }
    let val_x: Vec<&Tensor<f32>> = val.iter().map(|&i| images[i]).collect();
    let val_y: Vec<usize> = val.iter().map(|&i| labels[i]).collect();
    let adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut opt = Adam::new(adam, &model.store);
    let mut best = (model.cross_entropy(&val_x, &val_y)?, model.store.clone());
    let (mut stale, mut epochs) = (0, 0);
    let mut history = Vec::new();
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        train.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &model.store, true);
            let x = tape.constant(stack(batch.iter().map(|&i| images[i]))?);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let z = model.logits(&mut tape, &p, x)?;
            let loss = tape.cross_entropy(z, &y)?;
            train_loss += tape.scalar(loss) as f64 * batch.len() as f64;
            let grads = tape.backward(loss);
            opt.step(&mut model.store, &p, &grads);
        }
        if !model.store.all_finite() {
            return Err(Error::Diverged { step: epochs, what: "classifier weights".into() });
        }
        let ce = model.cross_entropy(&val_x, &val_y)?;
        history.push((train_loss / train.len() as f64, ce));
        if ce < best.0 {
            best = (ce, model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.store = best.1;
    Ok(TrainedClassifier { classifier: model, heldout_ce: best.0, epochs, history })
}

/// The five classifier inputs compared by the evidence experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSetting {
    Frames,
    RenderedNoColor,
    RenderedVertexColor,
    RenderedTextured,
    TextureMap,
}

impl EvidenceSetting {
    pub const ALL: [EvidenceSetting; 5] = [
        EvidenceSetting::Frames,
        EvidenceSetting::RenderedNoColor,
        EvidenceSetting::RenderedVertexColor,
        EvidenceSetting::RenderedTextured,
        EvidenceSetting::TextureMap,
    ];

    pub fn textured(self) -> bool {
        matches!(self, EvidenceSetting::Frames | EvidenceSetting::RenderedTextured | EvidenceSetting::TextureMap)
    }

    pub fn label(self) -> &'static str {
        match self {
            EvidenceSetting::Frames => "Frames",
            EvidenceSetting::RenderedNoColor => "Rd w/o color",
            EvidenceSetting::RenderedVertexColor => "Rd vertex color",
            EvidenceSetting::RenderedTextured => "Rd textures",
            EvidenceSetting::TextureMap => "Texture maps",
        }
    }
}

/// Classifier inputs of one setting for every frame of a clip.
pub fn evidence_inputs(
    clip: &ClipRecord,
    basis: &BlendshapeBasis,
    camera: &Camera,
    texture_size: usize,
    setting: EvidenceSetting,
    frames: &[usize],
) -> Result<Vec<Tensor<f32>>> {
    let texture = clip_texture(clip, texture_size)?;
    frames
        .iter()
        .map(|&t| {
            if t >= clip.len() {
                return Err(shape_err_fmt!("frame {} of a {}-frame clip", t, clip.len()));
            }
            let geom = || FrameGeometry::new(basis, &clip.params(t), camera);
            Ok(match setting {
                EvidenceSetting::Frames => clip.frames[t].clone(),
                EvidenceSetting::RenderedNoColor => render_shaded(&geom()?),
                EvidenceSetting::RenderedVertexColor => render_vertex_colored(&geom()?, clip.expression, clip.ciec().intensity()),
                EvidenceSetting::RenderedTextured => render_textured(&geom()?, &texture)?,
                EvidenceSetting::TextureMap => texture.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvidenceConfig {
    pub folds: usize,
    /// Evenly spaced frames used per clip; `None` uses all.
    pub frames_per_clip: Option<usize>,
    pub texture_size: usize,
    pub classifier: ClassifierConfig,
    pub seed: u64,
}

impl Default for EvidenceConfig {
    fn default() -> Self {
        Self { folds: 5, frames_per_clip: None, texture_size: 64, classifier: ClassifierConfig::default(), seed: 29 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingScore {
    pub setting: EvidenceSetting,
    /// Test cross-entropy averaged over folds.
    pub type_ce: f64,
    pub level_ce: f64,
    pub type_fold_ce: Vec<f64>,
    pub level_fold_ce: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub folds: usize,
    pub clips: usize,
    pub images_per_setting: usize,
    pub settings: Vec<SettingScore>,
    pub textured_max_type: f64,
    pub textured_max_level: f64,
    pub untextured_min_type: f64,
    pub untextured_min_level: f64,
}

impl EvidenceReport {
    /// Untextured minimum over textured maximum, per target.
    pub fn ratios(&self) -> (f64, f64) {
        (self.untextured_min_type / self.textured_max_type, self.untextured_min_level / self.textured_max_level)
    }

    /// Whether every untextured CE is at least `factor` times every textured one.
    pub fn ordering_holds(&self, factor: f64) -> bool {
        let (t, l) = self.ratios();
        t >= factor && l >= factor
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| Input | CE type | CE level |\n|---|---|---|\n");
        for r in &self.settings {
            s += &format!("| {} | {:.4} | {:.4} |\n", r.setting.label(), r.type_ce, r.level_ce);
        }
        s
    }
}

/// Assigns clips to folds so that the clips of each label land in distinct
/// folds where possible.
pub fn stratified_folds(labels: &[usize], folds: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for members in by_label.values_mut() {
        members.shuffle(rng);
        for &i in members.iter() {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

/// Cross-validated type and level classification from each input setting.
/// Clips are the unit of the split; `clips` must carry expressive labels.
pub fn evidence_experiment(
    clips: &[ClipRecord],
    basis: &BlendshapeBasis,
    camera: &Camera,
    cfg: &EvidenceConfig,
    mut progress: impl FnMut(EvidenceSetting, usize),
) -> Result<EvidenceReport> {
    if cfg.folds < 2 {
        return Err(Error::Config("evidence experiment needs at least two folds".into()));
    }
    let type_of = |c: &ClipRecord| c.expression.index();
    if clips.iter().any(|c| type_of(c).is_none()) {
        return Err(Error::Degenerate("evidence experiment needs expressive clips only".into()));
    }
    if clips.len() < cfg.folds {
        return Err(Error::Degenerate(format!("{} clips for {} folds", clips.len(), cfg.folds)));
    }
    let type_labels: Vec<usize> = clips.iter().map(|c| type_of(c).expect("checked")).collect();
    let level_labels: Vec<usize> = clips.iter().map(|c| c.level as usize - 1).collect();
    let joint: Vec<usize> = type_labels.iter().zip(&level_labels).map(|(t, l)| t * 3 + l).collect();
    let mut rng = derive(cfg.seed, 0xE71D);
    let fold_of = stratified_folds(&joint, cfg.folds, &mut rng);
    let frame_ids: Vec<Vec<usize>> = clips
        .iter()
        .map(|c| match cfg.frames_per_clip {
            Some(k) if k < c.len() => (0..k).map(|i| i * c.len() / k).collect(),
            _ => (0..c.len()).collect(),
        })
        .collect();

    let mut settings = Vec::new();
    for setting in EvidenceSetting::ALL {
        let mut images = Vec::new();
        let (mut ty, mut lv, mut group) = (Vec::new(), Vec::new(), Vec::new());
        for (ci, clip) in clips.iter().enumerate() {
            for img in evidence_inputs(clip, basis, camera, cfg.texture_size, setting, &frame_ids[ci])? {
                images.push(img);
                ty.push(type_labels[ci]);
                lv.push(level_labels[ci]);
                group.push(ci);
            }
        }
        let mut type_fold_ce = Vec::new();
        let mut level_fold_ce = Vec::new();
        for fold in 0..cfg.folds {
            progress(setting, fold);
            let (train, test): (Vec<usize>, Vec<usize>) = (0..images.len()).partition(|&i| fold_of[group[i]] != fold);
            let tr_x: Vec<&Tensor<f32>> = train.iter().map(|&i| &images[i]).collect();
            let te_x: Vec<&Tensor<f32>> = test.iter().map(|&i| &images[i]).collect();
            let tr_g: Vec<usize> = train.iter().map(|&i| group[i]).collect();
            for (labels, classes, out) in [(&ty, NUM_TYPES, &mut type_fold_ce), (&lv, 3, &mut level_fold_ce)] {
                let tr_y: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
                let te_y: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
                let ccfg = ClassifierConfig { seed: mix(cfg.classifier.seed, fold as u64), ..cfg.classifier.clone() };
                let trained = train_expression_classifier(&tr_x, &tr_y, &tr_g, classes, &ccfg)?;
                out.push(trained.classifier.cross_entropy(&te_x, &te_y)?);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        settings.push(SettingScore {
            setting,
            type_ce: mean(&type_fold_ce),
            level_ce: mean(&level_fold_ce),
            type_fold_ce,
            level_fold_ce,
        });
    }
    let pick = |textured: bool, f: fn(&SettingScore) -> f64| settings.iter().filter(move |s| s.setting.textured() == textured).map(f);
    Ok(EvidenceReport {
        folds: cfg.folds,
        clips: clips.len(),
        images_per_setting: frame_ids.iter().map(Vec::len).sum(),
        textured_max_type: pick(true, |s| s.type_ce).fold(f64::NEG_INFINITY, f64::max),
        textured_max_level: pick(true, |s| s.level_ce).fold(f64::NEG_INFINITY, f64::max),
        untextured_min_type: pick(false, |s| s.type_ce).fold(f64::INFINITY, f64::min),
        untextured_min_level: pick(false, |s| s.level_ce).fold(f64::INFINITY, f64::min),
        settings,
    })
}

/// Type and level classifiers trained on ground-truth frames, used to score
/// the expression content of synthesized frames.
#[derive(Debug, Clone)]
pub struct FrameClassifiers {
    pub expression: ExpressionClassifier,
    pub level: ExpressionClassifier,
}

impl FrameClassifiers {
    /// Trains on the `split` frames of expressive clips, held out by clip.
    pub fn train(clips: &[ClipRecord], split: Split, cfg: &ClassifierConfig) -> Result<Self> {
        let (mut x, mut ty, mut lv, mut g) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (ci, c) in clips.iter().enumerate() {
            let Some(t) = c.expression.index() else { continue };
            for f in split.range(c.len()) {
                x.push(&c.frames[f]);
                ty.push(t);
                lv.push(c.level as usize - 1);
                g.push(ci);
            }
        }
        let expression = train_expression_classifier(&x, &ty, &g, NUM_TYPES, cfg)?.classifier;
        let level = train_expression_classifier(&x, &lv, &g, 3, cfg)?.classifier;
        Ok(Self { expression, level })
    }
}

/// Where the evaluated geometry comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeometrySource {
    /// Decoupled ground-truth coefficients.
    Tracked,
    /// Coefficients predicted from audio, then decoupled.
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ce_level: Option<f64>,
    pub ce_type: Option<f64>,
    pub lmd_mouth: f64,
    pub lmd_face: f64,
}

/// Reference row reported for the full method on real video.
pub const REFERENCE_ROW: (f64, f64, f64, f64, f64) = (30.39, 0.91, 0.029, 0.18, 0.39);

impl EvalReport {
    pub fn markdown(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let (p, s, l, t, m) = REFERENCE_ROW;
        format!(
            "| Method | PSNR | SSIM | CE-level | CE-type | LMD |\n|---|---|---|---|---|---|\n\
             | this model | {:.2} | {:.4} | {} | {} | {:.4} |\n\
             | reference (real video) | {p} | {s} | {l} | {t} | {m} |\n",
            self.psnr,
            self.ssim,
            opt(self.ce_level),
            opt(self.ce_type),
            self.lmd_mouth,
        )
    }
}

/// One frame to score: generated and ground-truth image and landmarks.
#[derive(Debug, Clone)]
pub struct ScoredFrame {
    pub generated: Tensor<f32>,
    pub truth: Tensor<f32>,
    pub generated_landmarks: Vec<[f64; 2]>,
    pub true_landmarks: Vec<[f64; 2]>,
    pub expression: usize,
    pub level: usize,
}

/// Averages image, landmark and classifier metrics over frames. PSNR of
/// identical frames is capped at 100 dB for averaging.
pub fn score_frames(frames: &[ScoredFrame], classifiers: Option<&FrameClassifiers>) -> Result<EvalReport> {
    if frames.is_empty() {
        return Err(Error::Degenerate("no frames to evaluate".into()));
    }
    let n = frames.len() as f64;
    let (mut ps, mut ss, mut lm, mut lf) = (0.0, 0.0, 0.0, 0.0);
    for f in frames {
        ps += psnr(&f.generated, &f.truth, 1.0)?.min(100.0);
        ss += ssim(&f.generated, &f.truth)?;
        lm += lmd(&f.true_landmarks, &f.generated_landmarks, LandmarkSubset::Mouth20)?;
        lf += lmd(&f.true_landmarks, &f.generated_landmarks, LandmarkSubset::Face68)?;
    }
    let (ce_type, ce_level) = match classifiers {
        Some(c) => {
            let x: Vec<&Tensor<f32>> = frames.iter().map(|f| &f.generated).collect();
            let ty: Vec<usize> = frames.iter().map(|f| f.expression).collect();
            let lv: Vec<usize> = frames.iter().map(|f| f.level).collect();
            (Some(c.expression.cross_entropy(&x, &ty)?), Some(c.level.cross_entropy(&x, &lv)?))
        }
        None => (None, None),
    };
    Ok(EvalReport { frames: frames.len(), psnr: ps / n, ssim: ss / n, ce_level, ce_type, lmd_mouth: lm / n, lmd_face: lf / n })
}

/// Synthesizes the `split` frames of every expressive clip and scores them.
/// Landmarks always compare audio-predicted geometry with the truth.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &Model,
    store: &ParamStore<f32>,
    clips: &[ClipRecord],
    basis: &BlendshapeBasis,
    camera: &Camera,
    source: GeometrySource,
    split: Split,
    classifiers: Option<&FrameClassifiers>,
) -> Result<EvalReport> {
    let mut scored = Vec::new();
    for clip in clips {
        let Some(expression) = clip.expression.index() else { continue };
        let range = split.range(clip.len());
        if range.is_empty() {
            continue;
        }
        let predicted = model.audio.predict_seq(store, &clip.audio_features, &vec![clip.ciec(); clip.len()])?;
        let source_betas: Vec<Vec<f64>> = match source {
            GeometrySource::Tracked => range.clone().map(|t| clip.beta(t)).collect(),
            GeometrySource::Audio => predicted[range.clone()].to_vec(),
        };
        let neutral = model.decouple.decouple_batch(store, &source_betas)?;
        let mut inputs = Vec::new();
        let mut meta = Vec::new();
        for (t, beta) in range.clone().zip(neutral) {
            let params = FaceParams { pose: clip.pose(t), ..FaceParams::with_beta(&beta) };
            inputs.push(FrameInput::prepare(basis, camera, &params, clip.ciec(), &clip.frames[t], model.cfg.texture_size)?);
            let pred = FaceParams { pose: clip.pose(t), ..FaceParams::with_beta(&predicted[t]) };
            meta.push((t, projected_landmarks(basis, &pred, camera)?, projected_landmarks(basis, &clip.params(t), camera)?));
        }
        for (chunk, m) in inputs.chunks(8).zip(meta.chunks(8)) {
            for (r, (t, gl, tl)) in render_batch(model, store, chunk)?.into_iter().zip(m) {
                scored.push(ScoredFrame {
                    generated: r.image,
                    truth: clip.frames[*t].clone(),
                    generated_landmarks: gl.clone(),
                    true_landmarks: tl.clone(),
                    expression,
                    level: clip.level as usize - 1,
                });
            }
        }
    }
    score_frames(&scored, classifiers)
}

//! End-to-end training of the texture, teeth and rendering networks against
//! ground-truth frames with a fixed random-feature perceptual loss.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::face::{BlendshapeBasis, FaceParams};
use crate::metrics::{psnr, psnr_from_mse, ssim};
use crate::nn::{rel_error, Adam, AdamConfig, Bound, ParamStore};
use crate::pipeline::{stack, FrameInput, Model, Rendered};
use crate::raster::Camera;
use crate::rng::{derive, normal};
use crate::synth::{split_index, ClipRecord};
use crate::tape::{Tape, Var};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    RandomFeatures,
    PixelL1,
}

/// Fixed, never-trained three-stage convolutional feature pyramid. The
/// first stage passes the input through unchanged next to its random
/// channels, so the feature map is injective.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<(Tensor<f64>, Tensor<f64>, usize)>,
}

pub const PERCEPTUAL_WIDTHS: [usize; 3] = [8, 16, 32];

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = derive(seed, 0x9E7C);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &w) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            let c_out = if i == 0 { w + 3 } else { w };
            let fan = (c_in * 9) as f64;
            let mut wt: Vec<f64> = (0..c_out * c_in * 9).map(|_| normal(&mut rng) * (2.0 / fan).sqrt()).collect();
            let mut b: Vec<f64> = (0..c_out).map(|_| 0.1 * normal(&mut rng)).collect();
            if i == 0 {
                for o in 0..3 {
                    let k = &mut wt[o * c_in * 9..(o + 1) * c_in * 9];
                    k.iter_mut().for_each(|v| *v = 0.0);
                    k[o * 9 + 4] = 1.0;
                    b[o] = 0.0;
                }
            }
            let stride = if i == 0 { 1 } else { 2 };
            stages.push((
                Tensor::from_vec(&[c_out, c_in, 3, 3], wt).expect("sized"),
                Tensor::from_vec(&[c_out], b).expect("sized"),
                stride,
            ));
            c_in = c_out;
        }
        let e = Self { stages };
        assert!(e.first_stage_is_injective());
        e
    }

    /// The first three output channels copy the input exactly.
    pub fn first_stage_is_injective(&self) -> bool {
        let (w, b, stride) = &self.stages[0];
        let c_in = w.shape()[1];
        *stride == 1
            && (0..3).all(|o| {
                b.data()[o] == 0.0
                    && w.data()[o * c_in * 9..(o + 1) * c_in * 9]
                        .iter()
                        .enumerate()
                        .all(|(j, &v)| v == if j == o * 9 + 4 { 1.0 } else { 0.0 })
            })
    }

    pub fn features<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b, stride) in &self.stages {
            let (w, b) = (tape.constant(w.cast()), tape.constant(b.cast()));
            let y = tape.conv2d(h, w, Some(b), *stride, 1)?;
            h = tape.leaky_relu(y, T::c(0.2));
            out.push(h);
        }
        Ok(out)
    }
}

/// Mean over pyramid stages of the mean absolute feature difference, or the
/// plain pixel L1 distance.
pub fn perceptual_loss<T: Real>(
    tape: &mut Tape<T>,
    extractor: &PerceptualExtractor,
    mode: PerceptualMode,
    a: Var,
    b: Var,
) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(shape_err_fmt!("perceptual loss of {:?} and {:?}", tape.shape(a), tape.shape(b)));
    }
    match mode {
        PerceptualMode::PixelL1 => {
            let d = tape.sub(a, b)?;
            let d = tape.abs(d);
            Ok(tape.mean(d))
        }
        PerceptualMode::RandomFeatures => {
            let fa = extractor.features(tape, a)?;
            let fb = extractor.features(tape, b)?;
            let mut terms = Vec::with_capacity(fa.len());
            for (x, y) in fa.into_iter().zip(fb) {
                let d = tape.sub(x, y)?;
                let d = tape.abs(d);
                terms.push(tape.mean(d));
            }
            let n = terms.len();
            let mut s = terms[0];
            for t in &terms[1..] {
                s = tape.add(s, *t)?;
            }
            Ok(tape.scale(s, T::one() / T::c(n as f64)))
        }
    }
}

/// Frozen-value perceptual distance between two `C x H x W` images.
pub fn perceptual_distance(extractor: &PerceptualExtractor, mode: PerceptualMode, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let s = a.shape().to_vec();
    let va = tape.constant(a.cast::<f64>().reshape(&[&[1], s.as_slice()].concat())?);
    let vb = tape.constant(b.cast::<f64>().reshape(&[&[1], b.shape()].concat())?);
    let l = perceptual_loss(&mut tape, extractor, mode, va, vb)?;
    Ok(tape.scalar(l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub perceptual_mode: PerceptualMode,
    /// Steps between full training-set evaluations (early stop check).
    pub eval_every: usize,
    /// Stop once training-set PSNR and SSIM both reach these.
    pub target_psnr: Option<f64>,
    pub target_ssim: Option<f64>,
    /// Finite-difference audit of the optimizer's gradients on ~1% of steps.
    pub audit: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            max_steps: 5000,
            seed: 17,
            perceptual_mode: PerceptualMode::RandomFeatures,
            eval_every: 250,
            target_psnr: Some(30.0),
            target_ssim: Some(0.9),
            audit: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("learning rate, batch size and eval interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A training frame: precomputed inputs and the ground-truth image.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub input: FrameInput<f32>,
    pub target: Tensor<f32>,
    pub clip: usize,
    pub frame: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    /// Batch PSNR of the composite.
    pub psnr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub step: usize,
    pub probes: usize,
    pub max_rel_error: f64,
    pub kinks: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_psnr: f64,
    pub train_ssim: f64,
    pub stopped_early: bool,
    pub history: Vec<LossRow>,
    pub audits: Vec<AuditRow>,
}

/// Audit tolerance for optimizer gradients.
pub const AUDIT_TOLERANCE: f64 = 1e-3;

fn batch_loss<T: Real>(
    model: &Model,
    tape: &mut Tape<T>,
    p: &Bound,
    extractor: &PerceptualExtractor,
    mode: PerceptualMode,
    inputs: &[FrameInput<T>],
    target: &Tensor<T>,
) -> Result<(Var, Var)> {
    let out = model.forward(tape, p, inputs)?;
    let t = tape.constant(target.clone());
    Ok((perceptual_loss(tape, extractor, mode, out.composite, t)?, out.composite))
}

/// Trains `dyntex.*`, `teeth.*` and `render.*` on the given frames.
/// On a non-finite loss the store is rolled back to the last evaluated
/// state and an error is returned.
pub fn train_end_to_end(
    model: &Model,
    store: &mut ParamStore<f32>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut log: impl FnMut(&LossRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Degenerate("no training frames".into()));
    }
    let extractor = PerceptualExtractor::new(cfg.seed);
    let mask: Vec<bool> = store.ids().map(|id| Model::is_synthesis_param(store.name(id))).collect();
    let adam = AdamConfig { learning_rate: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, ..AdamConfig::default() };
    let mut opt = Adam::new(adam, store);
    let mut rng = derive(cfg.seed, 0x7A11);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut last_good = store.clone();
    let mut report = TrainReport {
        steps: 0,
        final_loss: f64::NAN,
        train_psnr: 0.0,
        train_ssim: 0.0,
        stopped_early: false,
        history: Vec::new(),
        audits: Vec::new(),
    };

    for step in 0..cfg.max_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let inputs: Vec<FrameInput<f32>> = idx.iter().map(|&i| samples[i].input.clone()).collect();
        let target = stack(idx.iter().map(|&i| &samples[i].target))?;

        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, true);
        let (loss, composite) = batch_loss(model, &mut tape, &p, &extractor, cfg.perceptual_mode, &inputs, &target)?;
        let lv = tape.scalar(loss) as f64;
        if !lv.is_finite() {
            *store = last_good;
            return Err(Error::Diverged { step, what: format!("perceptual loss is {lv}") });
        }
        let mse = tape
            .value(composite)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>()
            / target.len() as f64;
        let grads = tape.backward(loss);
        let flat: Vec<Option<&[f32]>> = p.vars().iter().zip(&mask).map(|(v, m)| if *m { grads.get(*v) } else { None }).collect();

        if cfg.audit && (step == 0 || rng.gen_bool(0.01)) {
            report.audits.push(audit_step(model, store, &extractor, cfg, &inputs, &target, &flat, step)?);
        }
        opt.step_flat(store, &flat);
        drop(tape);

        let row = LossRow { step, loss: lv, psnr: psnr_from_mse(mse, 1.0) };
        log(&row);
        report.history.push(row);
        report.steps = step + 1;
        report.final_loss = lv;

        let last = step + 1 == cfg.max_steps;
        if (step + 1) % cfg.eval_every == 0 || last {
            if !store.all_finite() {
                *store = last_good;
                return Err(Error::Diverged { step, what: "non-finite parameters".into() });
            }
            let (ps, ss) = evaluate_frames(model, store, samples)?;
            report.train_psnr = ps;
            report.train_ssim = ss;
            last_good = store.clone();
            let hit = cfg.target_psnr.map_or(false, |t| ps >= t) && cfg.target_ssim.map_or(true, |t| ss >= t);
            if hit {
                report.stopped_early = !last;
                break;
            }
        }
    }
    Ok(report)
}

/// Compares the `f32` gradients the optimizer is about to apply with `f64`
/// central differences on a few sampled parameters.
#[allow(clippy::too_many_arguments)]
fn audit_step(
    model: &Model,
    store: &ParamStore<f32>,
    extractor: &PerceptualExtractor,
    cfg: &TrainConfig,
    inputs: &[FrameInput<f32>],
    target: &Tensor<f32>,
    grads: &[Option<&[f32]>],
    step: usize,
) -> Result<AuditRow> {
    const PROBES: usize = 8;
    let s64: ParamStore<f64> = store.cast();
    let in64: Vec<FrameInput<f64>> = inputs.iter().map(|f| f.cast()).collect();
    let t64: Tensor<f64> = target.cast();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, s, false);
        let (l, _) = batch_loss(model, &mut tape, &p, extractor, cfg.perceptual_mode, &in64, &t64)?;
        Ok(tape.scalar(l))
    };
    let f0 = eval(&s64)?;
    let mut rng = derive(cfg.seed ^ step as u64, 0xA0D17);
    let candidates: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .filter_map(|(k, g)| g.map(|g| (k, g.len())))
        .collect();
    let ids: Vec<_> = s64.ids().collect();
    let mut work = s64.clone();
    let (mut max_err, mut kinks, mut probes) = (0.0f64, 0usize, 0usize);
    let mut tries = 0;
    while probes < PROBES && tries < 8 * PROBES {
        tries += 1;
        let (k, n) = candidates[rng.gen_range(0..candidates.len())];
        let j = rng.gen_range(0..n);
        let analytic = grads[k].expect("candidate")[j] as f64;
        let orig = work.get(ids[k]).data()[j];
        let h = 1e-4 * orig.abs().max(1.0);
        work.get_mut(ids[k]).data_mut()[j] = orig + h;
        let fp = eval(&work)?;
        work.get_mut(ids[k]).data_mut()[j] = orig - h;
        let fm = eval(&work)?;
        work.get_mut(ids[k]).data_mut()[j] = orig;
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        if (fwd - bwd).abs() > (1e-3 * fwd.abs().max(bwd.abs())).max(1e-6) {
            kinks += 1;
            continue;
        }
        max_err = max_err.max(rel_error(analytic, (fp - fm) / (2.0 * h)));
        probes += 1;
    }
    Ok(AuditRow { step, probes, max_rel_error: max_err, kinks, passed: probes > 0 && max_err <= AUDIT_TOLERANCE })
}

/// Which frames of each clip to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Early part, `t < split_index`.
    Train,
    /// Late part, `t >= split_index`.
    Test,
    All,
}

impl Split {
    pub fn range(self, len: usize) -> core::ops::Range<usize> {
        let s = split_index(len);
        match self {
            Split::Train => 0..s,
            Split::Test => s..len,
            Split::All => 0..len,
        }
    }
}

/// Builds frames for training or evaluation: geometry comes from the
/// decoupled ground-truth coefficients, the code from the clip label and the
/// background from the ground-truth frame itself.
pub fn frame_samples(
    model: &Model,
    store: &ParamStore<f32>,
    clips: &[ClipRecord],
    basis: &BlendshapeBasis,
    camera: &Camera,
    split: Split,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (ci, clip) in clips.iter().enumerate() {
        let range = split.range(clip.len());
        if range.is_empty() {
            continue;
        }
        let betas: Vec<Vec<f64>> = range.clone().map(|t| clip.beta(t)).collect();
        let neutral = model.decouple.decouple_batch(store, &betas)?;
        for (t, beta) in range.zip(neutral) {
            let params = FaceParams { pose: clip.pose(t), ..FaceParams::with_beta(&beta) };
            let input = FrameInput::prepare(basis, camera, &params, clip.ciec(), &clip.frames[t], model.cfg.texture_size)?;
            out.push(TrainSample { input, target: clip.frames[t].clone(), clip: ci, frame: t });
        }
    }
    Ok(out)
}

/// Mean PSNR and SSIM of the model's renders over the given frames.
pub fn evaluate_frames(model: &Model, store: &ParamStore<f32>, samples: &[TrainSample]) -> Result<(f64, f64)> {
    let mut ps = 0.0;
    let mut ss = 0.0;
    for chunk in samples.chunks(8) {
        let r = render_batch(model, store, &chunk.iter().map(|s| s.input.clone()).collect::<Vec<_>>())?;
        for (img, s) in r.iter().zip(chunk) {
            ps += psnr(&img.image, &s.target, 1.0)?.min(100.0);
            ss += ssim(&img.image, &s.target)?;
        }
    }
    let n = samples.len() as f64;
    Ok((ps / n, ss / n))
}

/// Frozen batched inference.
pub fn render_batch<T: Real>(model: &Model, store: &ParamStore<T>, inputs: &[FrameInput<T>]) -> Result<Vec<Rendered>> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, store, false);
    let out = model.forward(&mut tape, &p, inputs)?;
    let (c, a, f) = (tape.value(out.composite), tape.value(out.alpha), tape.value(out.face));
    let split = |t: &Tensor<T>, i: usize| {
        let s = &t.shape()[1..];
        let n: usize = s.iter().product();
        Tensor::from_vec(s, t.data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64() as f32).collect()).expect("sized")
    };
    Ok((0..inputs.len()).map(|i| Rendered { image: split(c, i), face: split(f, i), alpha: split(a, i) }).collect())
}

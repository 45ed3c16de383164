//! Audio-expression submodule: an LSTM over per-frame audio features plus a
//! CIEC embedding predicts a coefficient sequence, trained on vertex-weighted
//! geometry error with first- and second-order temporal smoothness.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ciec::{Ciec, NUM_TYPES};
use crate::dyntex::ciec_tensor;
use crate::face::{BlendshapeBasis, VertexWeights, BETA_JAW, N_BETA};
use crate::nn::{Adam, AdamConfig, Bound, Gating, Linear, ParamStore, RecurrentEncoder};
use crate::rng::{derive, SeededRng};
use crate::synth::{correlation, split_index, ClipRecord, AUDIO_DIM};
use crate::tape::{Tape, Var};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

pub const HIDDEN: usize = 64;
pub const CIEC_FEATURES: usize = 16;

/// First-difference kernel.
pub const DLT: [f64; 2] = [-1.0, 1.0];
/// Second-difference kernel.
pub const LPL: [f64; 3] = [-1.0, 2.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioLossWeights {
    pub lambda_s1: f64,
    pub lambda_s2: f64,
}

impl Default for AudioLossWeights {
    fn default() -> Self {
        Self { lambda_s1: 5.0, lambda_s2: 5.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AudioExpNet {
    pub encoder: RecurrentEncoder,
    pub ciec_fc: Linear,
    pub head: Linear,
}

impl AudioExpNet {
    /// Registers `audioexp.enc.*`, `audioexp.ciec.*` and `audioexp.head.*`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SeededRng) -> Self {
        let encoder = RecurrentEncoder::new(store, "audioexp.enc", AUDIO_DIM, HIDDEN, Gating::Lstm, rng);
        let ciec_fc = Linear::new(store, "audioexp.ciec", NUM_TYPES, CIEC_FEATURES, true, rng);
        let head = Linear::new(store, "audioexp.head", HIDDEN + CIEC_FEATURES, N_BETA, true, rng);
        Self { encoder, ciec_fc, head }
    }

    /// `T x 16` audio and `T x 7` codes to `T x 64` coefficients. Causal.
    pub fn predict<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, audio: Var, ciec: Var) -> Result<Var> {
        Ok(self.predict_state(tape, p, audio, ciec, None)?.0)
    }

    pub fn predict_state<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        audio: Var,
        ciec: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, (Var, Var))> {
        let (a, c) = (tape.shape(audio).to_vec(), tape.shape(ciec).to_vec());
        if a.len() != 2 || c.len() != 2 || a[0] != c[0] || c[1] != NUM_TYPES {
            return Err(shape_err_fmt!("audio {:?} and codes {:?} must be T x {} and T x {}", a, c, AUDIO_DIM, NUM_TYPES));
        }
        let (h, st) = self.encoder.forward_state(tape, p, audio, state)?;
        let e = self.ciec_fc.forward(tape, p, ciec)?;
        let e = tape.tanh(e);
        let x = tape.concat(&[h, e], 1)?;
        Ok((self.head.forward(tape, p, x)?, st))
    }

    /// One streaming step: a single frame of audio and its code, carrying
    /// the recurrent state between calls.
    pub fn step<T: Real>(
        &self,
        store: &ParamStore<T>,
        audio: &[f64],
        code: &Ciec,
        state: Option<&AudioState<T>>,
    ) -> Result<(Vec<f64>, AudioState<T>)> {
        if audio.len() != AUDIO_DIM {
            return Err(shape_err_fmt!("audio frame of {} values, expected {}", audio.len(), AUDIO_DIM));
        }
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let a = tape.constant(Tensor::from_vec(&[1, AUDIO_DIM], audio.iter().map(|&v| T::c(v)).collect())?);
        let c = tape.constant(ciec_tensor(&[*code]));
        let st = state.map(|s| (tape.constant(s.h.clone()), tape.constant(s.c.clone())));
        let (y, (h, cc)) = self.predict_state(&mut tape, &p, a, c, st)?;
        let beta = tape.value(y).data().iter().map(|v| v.as_f64()).collect();
        Ok((beta, AudioState { h: tape.value(h).clone(), c: tape.value(cc).clone() }))
    }

    /// Frozen inference; rows of the result are per-frame coefficients.
    pub fn predict_seq<T: Real>(&self, store: &ParamStore<T>, audio: &Tensor<f32>, codes: &[Ciec]) -> Result<Vec<Vec<f64>>> {
        if audio.shape().len() != 2 || audio.shape()[0] != codes.len() {
            return Err(shape_err_fmt!("{} codes for audio of shape {:?}", codes.len(), audio.shape()));
        }
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let a = tape.constant(audio.cast());
        let c = tape.constant(ciec_tensor(codes));
        let y = self.predict(&mut tape, &p, a, c)?;
        Ok(tape.value(y).data().chunks_exact(N_BETA).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}

/// Recurrent state carried between streaming steps.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

/// Expression basis `64 x 3V` and per-coordinate vertex weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryOperator {
    pub basis: Tensor<f64>,
    pub weights: Vec<f64>,
}

impl GeometryOperator {
    pub fn new(basis: &BlendshapeBasis) -> Self {
        let v = basis.vertex_count();
        let w = VertexWeights::new(basis).w.iter().flat_map(|&x| [x; 3]).collect();
        Self { basis: Tensor::from_vec(&[N_BETA, 3 * v], basis.expression_basis.clone()).expect("sized"), weights: w }
    }

    /// Arbitrary operator, for hand-built bases.
    pub fn from_parts(basis: Tensor<f64>, weights: Vec<f64>) -> Result<Self> {
        let s = basis.shape();
        if s.len() != 2 || s[1] != weights.len() {
            return Err(shape_err_fmt!("basis {:?} and {} weights disagree", s, weights.len()));
        }
        Ok(Self { basis, weights })
    }

    pub fn columns(&self) -> usize {
        self.weights.len()
    }
}

/// Banded matrix applying a "valid" 1-D convolution along time:
/// `(T - k + 1) x T`.
pub fn temporal_matrix(kernel: &[f64], t: usize) -> Option<Tensor<f64>> {
    let k = kernel.len();
    if t < k {
        return None;
    }
    let rows = t - k + 1;
    let mut m = alloc::vec![0.0; rows * t];
    for r in 0..rows {
        m[r * t + r..r * t + r + k].copy_from_slice(kernel);
    }
    Some(Tensor::from_vec(&[rows, t], m).expect("sized"))
}

/// Tape handles of the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct AudioLossVars {
    pub total: Var,
    pub geometry: Var,
    pub dlt: Var,
    /// `None` when the sequence is shorter than three frames.
    pub lpl: Option<Var>,
}

/// `|W (D)|_F + l1 |dlt * D|_F + l2 |lpl * D|_F` with `D = (pred - gt) M`.
pub fn audio_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    gt: Var,
    op: &GeometryOperator,
    w: AudioLossWeights,
) -> Result<AudioLossVars> {
    let (ps, gs) = (tape.shape(pred).to_vec(), tape.shape(gt).to_vec());
    if ps != gs || ps.len() != 2 || ps[1] != op.basis.shape()[0] {
        return Err(shape_err_fmt!("audio loss needs equal T x {} inputs, got {:?} and {:?}", op.basis.shape()[0], ps, gs));
    }
    let t = ps[0];
    let diff = tape.sub(pred, gt)?;
    let m = tape.constant(op.basis.cast());
    let d = tape.matmul(diff, m)?;

    let cols = op.columns();
    let wt: Vec<T> = (0..t).flat_map(|_| op.weights.iter().map(|&x| T::c(x))).collect();
    let wt = tape.constant(Tensor::from_vec(&[t, cols], wt)?);
    let wd = tape.mul(d, wt)?;
    let geometry = frobenius(tape, wd);

    let filtered = |tape: &mut Tape<T>, kernel: &[f64]| -> Result<Option<Var>> {
        match temporal_matrix(kernel, t) {
            Some(k) => {
                let k = tape.constant(k.cast());
                let f = tape.matmul(k, d)?;
                Ok(Some(frobenius(tape, f)))
            }
            None => Ok(None),
        }
    };
    let dlt = match filtered(tape, &DLT)? {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    let lpl = filtered(tape, &LPL)?;
    let s1 = tape.scale(dlt, T::c(w.lambda_s1));
    let mut total = tape.add(geometry, s1)?;
    if let Some(l) = lpl {
        let s2 = tape.scale(l, T::c(w.lambda_s2));
        total = tape.add(total, s2)?;
    }
    Ok(AudioLossVars { total, geometry, dlt, lpl })
}

fn frobenius<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let sq = tape.square(x);
    let s = tape.sum(sq);
    tape.sqrt(s)
}

/// Frobenius norm of the first difference of `rows * M` along time.
pub fn dlt_energy(rows: &[Vec<f64>], op: &GeometryOperator) -> f64 {
    let geo: Vec<Vec<f64>> = rows.iter().map(|r| geometry_of(r, op)).collect();
    geo.windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Unweighted vertex offsets `beta M`.
pub fn geometry_of(beta: &[f64], op: &GeometryOperator) -> Vec<f64> {
    let n = op.columns();
    let m = op.basis.data();
    let mut out = alloc::vec![0.0; n];
    for (k, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (o, v) in out.iter_mut().zip(&m[k * n..(k + 1) * n]) {
                *o += b * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioExpConfig {
    pub weights: AudioLossWeights,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AudioExpConfig {
    fn default() -> Self {
        Self { weights: AudioLossWeights::default(), steps: 800, learning_rate: 3e-3, seed: 13 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioLogRow {
    pub step: usize,
    pub total: f64,
    pub geometry: f64,
    pub dlt: f64,
    pub lpl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioExpReport {
    pub weights: AudioLossWeights,
    pub steps: usize,
    pub history: Vec<AudioLogRow>,
    /// Pooled held-out correlation of the jaw coefficient.
    pub jaw_correlation: f64,
    /// Held-out RMSE of vertex offsets.
    pub geometry_rmse: f64,
    /// Held-out first-difference energy of predictions over ground truth.
    pub dlt_ratio: f64,
}

/// Sequence-by-sequence supervised training on the early split of each clip.
/// Only `audioexp.*` parameters move.
pub fn train_audio_exp<T: Real>(
    net: &AudioExpNet,
    store: &mut ParamStore<T>,
    clips: &[ClipRecord],
    basis: &BlendshapeBasis,
    cfg: &AudioExpConfig,
    mut log: impl FnMut(&AudioLogRow),
) -> Result<AudioExpReport> {
    if clips.is_empty() {
        return Err(Error::Degenerate("no clips to train on".into()));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(Error::Config("audio learning rate must be positive".into()));
    }
    let op = GeometryOperator::new(basis);
    let mask: Vec<bool> = store.ids().map(|id| store.name(id).starts_with("audioexp.")).collect();
    let mut opt = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() }, store);
    let mut rng = derive(cfg.seed, 0xA0E0);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let clip = &clips[rng.gen_range(0..clips.len())];
        let n = split_index(clip.len());
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, true);
        let (a, c, g) = clip_inputs::<T>(clip, n)?;
        let (a, c, g) = (tape.constant(a), tape.constant(c), tape.constant(g));
        let pred = net.predict(&mut tape, &p, a, c)?;
        let l = audio_loss(&mut tape, pred, g, &op, cfg.weights)?;
        let row = AudioLogRow {
            step,
            total: tape.scalar(l.total).as_f64(),
            geometry: tape.scalar(l.geometry).as_f64(),
            dlt: tape.scalar(l.dlt).as_f64(),
            lpl: l.lpl.map_or(0.0, |v| tape.scalar(v).as_f64()),
        };
        if !row.total.is_finite() {
            return Err(Error::Diverged { step, what: format!("audio loss is {}", row.total) });
        }
        let grads = tape.backward(l.total);
        let flat: Vec<Option<&[T]>> = p.vars().iter().zip(&mask).map(|(v, m)| if *m { grads.get(*v) } else { None }).collect();
        opt.step_flat(store, &flat);
        log(&row);
        history.push(row);
    }
    let mut report = evaluate_audio_exp(net, store, clips, basis)?;
    report.weights = cfg.weights;
    report.steps = cfg.steps;
    report.history = history;
    Ok(report)
}

/// Audio, codes and ground-truth coefficients of the first `n` frames.
pub fn clip_inputs<T: Real>(clip: &ClipRecord, n: usize) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let take = |t: &Tensor<f32>, w: usize| -> Result<Tensor<T>> {
        Tensor::from_vec(&[n, w], t.data()[..n * w].iter().map(|&v| T::c(v as f64)).collect())
    };
    let codes = alloc::vec![clip.ciec(); n];
    Ok((take(&clip.audio_features, AUDIO_DIM)?, ciec_tensor(&codes), take(&clip.beta_seq, N_BETA)?))
}

/// Held-out statistics: the whole clip is run causally and only the late
/// frames are scored.
pub fn evaluate_audio_exp<T: Real>(
    net: &AudioExpNet,
    store: &ParamStore<T>,
    clips: &[ClipRecord],
    basis: &BlendshapeBasis,
) -> Result<AudioExpReport> {
    let op = GeometryOperator::new(basis);
    let (mut pj, mut gj) = (Vec::new(), Vec::new());
    let (mut sq, mut count) = (0.0, 0usize);
    let (mut dp, mut dg) = (0.0, 0.0);
    for clip in clips {
        let pred = net.predict_seq(store, &clip.audio_features, &alloc::vec![clip.ciec(); clip.len()])?;
        let s = clip.split_index();
        let gt: Vec<Vec<f64>> = (s..clip.len()).map(|t| clip.beta(t)).collect();
        let pr = &pred[s..];
        for (p, g) in pr.iter().zip(&gt) {
            pj.push(p[BETA_JAW]);
            gj.push(g[BETA_JAW]);
            let (gp, gg) = (geometry_of(p, &op), geometry_of(g, &op));
            sq += gp.iter().zip(&gg).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += gp.len();
        }
        dp += dlt_energy(pr, &op).powi(2);
        dg += dlt_energy(&gt, &op).powi(2);
    }
    Ok(AudioExpReport {
        weights: AudioLossWeights::default(),
        steps: 0,
        history: Vec::new(),
        jaw_correlation: correlation(&pj, &gj),
        geometry_rmse: if count == 0 { 0.0 } else { (sq / count as f64).sqrt() },
        dlt_ratio: if dg > 0.0 { (dp / dg).sqrt() } else { f64::INFINITY },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciec::ExpressionType;
    use crate::nn::{gradient_check, GradCheckOptions};
    use crate::rng::{seeded, uniform};

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| uniform(&mut r, -1.0, 1.0)).collect()).unwrap()
    }

    fn net() -> (AudioExpNet, ParamStore<f64>) {
        let mut s = ParamStore::new();
        let n = AudioExpNet::new(&mut s, &mut seeded(2));
        (n, s)
    }

    fn run(n: &AudioExpNet, s: &ParamStore<f64>, a: &Tensor<f64>, c: &Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, s, false);
        let (va, vc) = (tape.constant(a.clone()), tape.constant(c.clone()));
        let y = n.predict(&mut tape, &p, va, vc).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn single_frame_and_length_mismatch() {
        let (n, s) = net();
        let out = run(&n, &s, &rand_t(1, &[1, 16]), &Tensor::zeros(&[1, 7]));
        assert_eq!(out.len(), 64);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &s, false);
        let a = tape.constant(rand_t(1, &[3, 16]));
        let c = tape.constant(Tensor::zeros(&[2, 7]));
        assert!(n.predict(&mut tape, &p, a, c).is_err());
    }

    #[test]
    fn prediction_is_causal() {
        let (n, s) = net();
        let a = rand_t(3, &[5, 16]);
        let c = ciec_tensor(&[Ciec::new(ExpressionType::Sad, 0.4).unwrap(); 5]);
        let first = run(&n, &s, &a, &c);
        let a2 = Tensor::from_vec(&[10, 16], [a.data(), a.data()].concat()).unwrap();
        let c2 = Tensor::from_vec(&[10, 7], [c.data(), c.data()].concat()).unwrap();
        let doubled = run(&n, &s, &a2, &c2);
        assert_eq!(&doubled[..first.len()], &first[..]);
    }

    #[test]
    fn streaming_matches_the_full_pass() {
        let (n, s) = net();
        let a = rand_t(9, &[4, 16]);
        let code = Ciec::new(ExpressionType::Fear, 0.9).unwrap();
        let full = run(&n, &s, &a, &ciec_tensor(&[code; 4]));
        let mut state = None;
        for t in 0..4 {
            let row: Vec<f64> = a.data()[t * 16..(t + 1) * 16].to_vec();
            let (b, st) = n.step(&s, &row, &code, state.as_ref()).unwrap();
            for (x, y) in b.iter().zip(&full[t * 64..(t + 1) * 64]) {
                assert!((x - y).abs() < 1e-12);
            }
            state = Some(st);
        }
    }

    #[test]
    fn predictor_gradients() {
        let (n, s) = net();
        let (a, c, g) = (rand_t(4, &[4, 16]), ciec_tensor(&[Ciec::new(ExpressionType::Happy, 0.7).unwrap(); 4]), rand_t(5, &[4, 64]));
        let op = GeometryOperator::from_parts(rand_t(6, &[64, 6]), alloc::vec![3.0, 3.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
        let rep = gradient_check(
            &s,
            |t, p| {
                let (va, vc, vg) = (t.constant(a.clone()), t.constant(c.clone()), t.constant(g.clone()));
                let y = n.predict(t, p, va, vc)?;
                Ok(audio_loss(t, y, vg, &op, AudioLossWeights::default())?.total)
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "{}", rep.max_rel_error);
    }

    #[test]
    fn kernels_annihilate_their_null_spaces() {
        let c = Tensor::from_vec(&[1, 6], alloc::vec![0.3; 6]).unwrap();
        let k1 = temporal_matrix(&DLT, 6).unwrap();
        let k2 = temporal_matrix(&LPL, 6).unwrap();
        assert_eq!(k1.shape(), &[5, 6]);
        assert_eq!(k2.shape(), &[4, 6]);
        for r in k1.data().chunks_exact(6) {
            assert_eq!(r.iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>(), 0.0);
        }
        let ramp: Vec<f64> = (0..6).map(|i| 0.25 + 1.5 * i as f64).collect();
        for r in k2.data().chunks_exact(6) {
            assert!(r.iter().zip(&ramp).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-12);
        }
        assert!(temporal_matrix(&LPL, 2).is_none());
    }

    #[test]
    fn equal_sequences_cost_nothing_and_short_sequences_skip_lpl() {
        let op = GeometryOperator::from_parts(rand_t(7, &[64, 3]), alloc::vec![1.0; 3]).unwrap();
        let x = rand_t(8, &[2, 64]);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x.clone()), tape.constant(x));
        let l = audio_loss(&mut tape, a, b, &op, AudioLossWeights::default()).unwrap();
        assert_eq!(tape.scalar(l.total), 0.0);
        assert!(l.lpl.is_none());
    }
}

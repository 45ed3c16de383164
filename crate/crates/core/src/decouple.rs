//! Decoupling network `f_d`: maps expression coefficients to the neutral-face
//! subspace while keeping the mouth where it was.
//!
//! `f_d(beta) = beta + mlp(beta)` with the last layer zero-initialised, so an
//! untrained network is exactly the identity.

use alloc::format;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ciec::ExpressionType;
use crate::face::{BlendshapeBasis, BETA_BROW, N_BETA};
use crate::nn::{Activation, Adam, AdamConfig, Bound, Discriminator, Mlp, ParamStore};
use crate::rng::{derive, normal, SeededRng};
use crate::synth::{split_index, ClipRecord};
use crate::tape::{Tape, Var};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

/// Floor and ceiling applied inside the adversarial logarithms.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoupleLossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for DecoupleLossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 50000.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DecoupleNets {
    pub fd: Mlp,
    pub disc: Discriminator,
}

impl DecoupleNets {
    /// Registers `decouple.fd.*` and `decouple.disc.*`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SeededRng) -> Self {
        let fd = Mlp::new(store, "decouple.fd", &[N_BETA, 128, N_BETA], Activation::Relu, rng);
        let last = fd.layers().last().expect("two layers");
        store.get_mut(last.w).data_mut().iter_mut().for_each(|v| *v = T::zero());
        let disc = Discriminator::new(store, "decouple.disc", &[N_BETA, 64, 1], Activation::LeakyRelu, rng);
        Self { fd, disc }
    }

    /// `N x 64` to `N x 64`.
    pub fn map<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, beta: Var) -> Result<Var> {
        let r = self.fd.forward(tape, p, beta)?;
        tape.add(beta, r)
    }

    /// `N x 64` to `N x 1` probabilities of "neutral".
    pub fn discriminate<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.disc.forward(tape, p, x)
    }

    /// Frozen inference on one coefficient vector.
    pub fn decouple<T: Real>(&self, store: &ParamStore<T>, beta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decouple_batch(store, &[beta.to_vec()])?.remove(0))
    }

    pub fn decouple_batch<T: Real>(&self, store: &ParamStore<T>, betas: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let x = tape.constant(rows_tensor(betas)?);
        let y = self.map(&mut tape, &p, x)?;
        Ok(tape.value(y).data().chunks_exact(N_BETA).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }
}

/// Stacks rows of length 64.
pub fn rows_tensor<T: Real>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    if rows.is_empty() || rows.iter().any(|r| r.len() != N_BETA) {
        return Err(shape_err_fmt!("expected a non-empty batch of {}-vectors", N_BETA));
    }
    let data = rows.iter().flat_map(|r| r.iter().map(|&v| T::c(v))).collect();
    Tensor::from_vec(&[rows.len(), N_BETA], data)
}

/// Linear map from coefficients to stacked mouth landmark offsets
/// (`64 x 3L`), taken from the basis rows of the mouth vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkOperator {
    pub matrix: Tensor<f64>,
    pub landmarks: usize,
}

impl LandmarkOperator {
    pub fn mouth(basis: &BlendshapeBasis) -> Self {
        Self::from_ids(basis, &basis.mouth_landmark_ids)
    }

    pub fn from_ids(basis: &BlendshapeBasis, ids: &[u32]) -> Self {
        let m = basis.gather_rows(ids);
        Self { matrix: Tensor::from_vec(&[N_BETA, 3 * ids.len()], m).expect("sized"), landmarks: ids.len() }
    }

    /// Per-landmark displacement lengths caused by a coefficient change.
    pub fn displacement(&self, d_beta: &[f64]) -> Vec<f64> {
        let n = 3 * self.landmarks;
        let m = self.matrix.data();
        let mut off = alloc::vec![0.0; n];
        for (k, &b) in d_beta.iter().enumerate().take(N_BETA) {
            for (o, v) in off.iter_mut().zip(&m[k * n..(k + 1) * n]) {
                *o += b * v;
            }
        }
        off.chunks_exact(3).map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()).collect()
    }
}

/// `mean log D(F1) + mean log(1 - D(f_d(F2)))`; `D` ascends it, `f_d`
/// descends it.
pub fn loss_adv<T: Real>(tape: &mut Tape<T>, nets: &DecoupleNets, p: &Bound, neutral: Var, any: Var) -> Result<Var> {
    let (lo, hi) = (T::c(LOG_EPS), T::c(1.0 - LOG_EPS));
    let real = nets.discriminate(tape, p, neutral)?;
    let real = tape.ln_clamped(real, lo, hi);
    let real = tape.mean(real);
    let mapped = nets.map(tape, p, any)?;
    let fake = nets.discriminate(tape, p, mapped)?;
    let fake = tape.one_minus(fake);
    let fake = tape.ln_clamped(fake, lo, hi);
    let fake = tape.mean(fake);
    tape.add(real, fake)
}

/// Mean absolute change that `f_d` makes to neutral coefficients.
pub fn loss_neutral<T: Real>(tape: &mut Tape<T>, nets: &DecoupleNets, p: &Bound, neutral: Var) -> Result<Var> {
    let y = nets.map(tape, p, neutral)?;
    let d = tape.sub(y, neutral)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean Euclidean displacement of the mouth landmarks between `beta` and
/// `f_d(beta)`, averaged over landmarks and batch.
pub fn loss_landmarks<T: Real>(
    tape: &mut Tape<T>,
    nets: &DecoupleNets,
    p: &Bound,
    batch: Var,
    lm: &LandmarkOperator,
) -> Result<Var> {
    let y = nets.map(tape, p, batch)?;
    landmark_gap(tape, y, batch, lm)
}

/// Landmark term between two coefficient batches.
pub fn landmark_gap<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, lm: &LandmarkOperator) -> Result<Var> {
    let n = tape.shape(a)[0];
    let d = tape.sub(a, b)?;
    let m = tape.constant(lm.matrix.cast());
    let off = tape.matmul(d, m)?;
    let sq = tape.square(off);
    let per = tape.reshape(sq, &[n * lm.landmarks, 3])?;
    let per = tape.sum_axis(per, 1)?;
    let len = tape.sqrt(per);
    Ok(tape.mean(len))
}

/// Brow offset injected per expression type, scaled by intensity.
pub fn brow_gain(ty: ExpressionType) -> f64 {
    use ExpressionType::*;
    match ty {
        Neutral => 0.0,
        Angry => -1.2,
        Contempt => 0.5,
        Disgusted => -0.8,
        Fear => 1.3,
        Happy => 0.6,
        Sad => 0.9,
        Surprised => 1.6,
    }
}

/// Coefficients with the clip's geometric expression perturbation applied.
pub fn perturb(beta: &[f64], ty: ExpressionType, intensity: f64, jitter: f64) -> Vec<f64> {
    let mut b = beta.to_vec();
    b[BETA_BROW] += brow_gain(ty) * intensity * (1.0 + jitter);
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoupleConfig {
    pub weights: DecoupleLossWeights,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Relative spread of the injected perturbation.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DecoupleConfig {
    fn default() -> Self {
        Self { weights: DecoupleLossWeights::default(), steps: 1500, batch_size: 32, learning_rate: 1e-3, jitter: 0.2, seed: 11 }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoupleLogRow {
    pub step: usize,
    pub adv: f64,
    pub neutral: f64,
    pub landmarks: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupleReport {
    pub weights: DecoupleLossWeights,
    pub steps: usize,
    pub history: Vec<DecoupleLogRow>,
    /// Held-out `|f_d(b) - b|_1 / 64` over neutral coefficients.
    pub neutral_l1: f64,
    /// Largest held-out mouth displacement (Frobenius over the 20 mouth
    /// landmarks) divided by the mouth width.
    pub mouth_ratio: f64,
    pub mouth_width: f64,
    /// Held-out accuracy of `D` on neutral vs mapped coefficients.
    pub disc_accuracy: f64,
    /// Mean `|f_d(b)_brow - b_brow|` removed from perturbed coefficients.
    pub brow_removed: f64,
}

/// Training and held-out pools drawn from the dataset.
#[derive(Debug, Clone)]
pub struct DecouplePools {
    pub neutral_train: Vec<Vec<f64>>,
    pub any_train: Vec<Vec<f64>>,
    pub neutral_test: Vec<Vec<f64>>,
    pub any_test: Vec<Vec<f64>>,
}

impl DecouplePools {
    /// Every generated coefficient vector is neutral geometry; the "any" pool
    /// adds each clip's brow perturbation. Early frames train, late frames
    /// evaluate.
    pub fn from_clips(clips: &[ClipRecord], jitter: f64, seed: u64) -> Result<Self> {
        if !clips.iter().any(|c| c.expression == ExpressionType::Neutral)
            || !clips.iter().any(|c| c.expression != ExpressionType::Neutral)
        {
            return Err(Error::Degenerate("decoupling needs neutral and non-neutral clips".into()));
        }
        let mut rng = derive(seed, 0xDEC0);
        let mut pools = Self { neutral_train: Vec::new(), any_train: Vec::new(), neutral_test: Vec::new(), any_test: Vec::new() };
        for c in clips {
            let split = split_index(c.len());
            let intensity = c.ciec().intensity();
            for t in 0..c.len() {
                let b = c.beta(t);
                let j = (jitter * normal(&mut rng)).clamp(-0.5, 0.5);
                let any = perturb(&b, c.expression, intensity, j);
                if t < split {
                    pools.neutral_train.push(b);
                    pools.any_train.push(any);
                } else {
                    pools.neutral_test.push(b);
                    pools.any_test.push(any);
                }
            }
        }
        if pools.neutral_test.is_empty() {
            return Err(Error::Degenerate("clips too short for a held-out tail".into()));
        }
        Ok(pools)
    }
}

fn pick(pool: &[Vec<f64>], n: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

/// Alternating 1:1 updates of `D` (ascending the adversarial term) and `f_d`
/// (descending the weighted total). Only `decouple.*` parameters move.
pub fn train_decouple<T: Real>(
    nets: &DecoupleNets,
    store: &mut ParamStore<T>,
    pools: &DecouplePools,
    basis: &BlendshapeBasis,
    cfg: &DecoupleConfig,
    mut log: impl FnMut(&DecoupleLogRow),
) -> Result<DecoupleReport> {
    if cfg.learning_rate <= 0.0 || cfg.batch_size == 0 {
        return Err(Error::Config("decouple learning rate and batch size must be positive".into()));
    }
    let lm = LandmarkOperator::mouth(basis);
    let fd_mask: Vec<bool> = store.ids().map(|id| store.name(id).starts_with("decouple.fd.")).collect();
    let d_mask: Vec<bool> = store.ids().map(|id| store.name(id).starts_with("decouple.disc.")).collect();
    let adam_cfg = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut opt_d = Adam::new(adam_cfg, store);
    let mut opt_f = Adam::new(adam_cfg, store);
    let mut rng = derive(cfg.seed, 0xDEC1);
    let w = cfg.weights;
    let mut history = Vec::new();

    for step in 0..cfg.steps {
        let nb = rows_tensor::<T>(&pick(&pools.neutral_train, cfg.batch_size, &mut rng))?;
        let ab = rows_tensor::<T>(&pick(&pools.any_train, cfg.batch_size, &mut rng))?;

        // discriminator: maximise the adversarial term
        {
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, store, true);
            let (n, a) = (tape.constant(nb.clone()), tape.constant(ab.clone()));
            let adv = loss_adv(&mut tape, nets, &p, n, a)?;
            let neg = tape.scale(adv, -T::one());
            check_finite(step, "adversarial", tape.scalar(adv).as_f64())?;
            let g = tape.backward(neg);
            let flat: Vec<Option<&[T]>> = p.vars().iter().zip(&d_mask).map(|(v, m)| if *m { g.get(*v) } else { None }).collect();
            opt_d.step_flat(store, &flat);
        }
        // mapping network
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, true);
        let (n, a) = (tape.constant(nb), tape.constant(ab));
        let adv = loss_adv(&mut tape, nets, &p, n, a)?;
        let neu = loss_neutral(&mut tape, nets, &p, n)?;
        let lmk = loss_landmarks(&mut tape, nets, &p, a, &lm)?;
        let t1 = tape.scale(neu, T::c(w.lambda1));
        let t2 = tape.scale(lmk, T::c(w.lambda2));
        let s = tape.add(adv, t1)?;
        let total = tape.add(s, t2)?;
        let row = DecoupleLogRow {
            step,
            adv: tape.scalar(adv).as_f64(),
            neutral: tape.scalar(neu).as_f64(),
            landmarks: tape.scalar(lmk).as_f64(),
            total: tape.scalar(total).as_f64(),
        };
        check_finite(step, "total", row.total)?;
        let g = tape.backward(total);
        let flat: Vec<Option<&[T]>> = p.vars().iter().zip(&fd_mask).map(|(v, m)| if *m { g.get(*v) } else { None }).collect();
        opt_f.step_flat(store, &flat);
        log(&row);
        history.push(row);
    }
    if !store.all_finite() {
        return Err(Error::Diverged { step: cfg.steps, what: "non-finite decoupling parameters".into() });
    }

    let mut report = evaluate_decouple(nets, store, pools, basis)?;
    report.weights = w;
    report.steps = cfg.steps;
    report.history = history;
    Ok(report)
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, what: format!("{what} loss is {v}") })
    }
}

/// Held-out statistics of a (possibly untrained) decoupling network.
pub fn evaluate_decouple<T: Real>(
    nets: &DecoupleNets,
    store: &ParamStore<T>,
    pools: &DecouplePools,
    basis: &BlendshapeBasis,
) -> Result<DecoupleReport> {
    let lm = LandmarkOperator::mouth(basis);
    let width = basis.mouth_width();
    let neutral_out = nets.decouple_batch(store, &pools.neutral_test)?;
    let neutral_l1 = mean(neutral_out.iter().zip(&pools.neutral_test).map(|(o, b)| l1(o, b) / N_BETA as f64));

    let any_out = nets.decouple_batch(store, &pools.any_test)?;
    let mut mouth_ratio: f64 = 0.0;
    let mut brow = Vec::new();
    for ((o, a), n) in any_out.iter().zip(&pools.any_test).zip(&pools.neutral_test) {
        let d: Vec<f64> = o.iter().zip(a).map(|(x, y)| x - y).collect();
        let fro = lm.displacement(&d).iter().map(|v| v * v).sum::<f64>().sqrt();
        mouth_ratio = mouth_ratio.max(fro / width);
        if (a[BETA_BROW] - n[BETA_BROW]).abs() > 1e-9 {
            brow.push((o[BETA_BROW] - a[BETA_BROW]).abs());
        }
    }

    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, store, false);
    let real = tape.constant(rows_tensor::<T>(&pools.neutral_test)?);
    let fake = tape.constant(rows_tensor::<T>(&any_out)?);
    let dr = nets.discriminate(&mut tape, &p, real)?;
    let df = nets.discriminate(&mut tape, &p, fake)?;
    let half = T::c(0.5);
    let hits = tape.value(dr).data().iter().filter(|v| **v > half).count()
        + tape.value(df).data().iter().filter(|v| **v <= half).count();
    let total = pools.neutral_test.len() + any_out.len();

    Ok(DecoupleReport {
        weights: DecoupleLossWeights::default(),
        steps: 0,
        history: Vec::new(),
        neutral_l1,
        mouth_ratio,
        mouth_width: width,
        disc_accuracy: hits as f64 / total as f64,
        brow_removed: mean(brow.into_iter()),
    })
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

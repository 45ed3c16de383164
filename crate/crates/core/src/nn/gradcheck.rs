use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::nn::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Number of scalar parameters probed.
    pub samples: usize,
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    pub seed: u64,
    /// Scales analytic gradients by 1.01 before comparing; the check must
    /// then fail.
    pub fault_injection: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples: 64, step: 1e-5, tolerance: 1e-4, seed: 0, fault_injection: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The one-sided slopes disagree: the probe straddles a ReLU/abs/clamp
    /// kink and the point is excluded from the verdict.
    pub kinked: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub max_rel_error: f64,
    pub kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares tape gradients of `loss` with central finite differences over a
/// random sample of scalar parameters (64-bit).
pub fn gradient_check<F>(store: &ParamStore<f64>, loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, s, false);
        let l = loss(&mut tape, &b)?;
        Ok(tape.scalar(l))
    };

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, true);
    let l = loss(&mut tape, &bound)?;
    let f0 = tape.scalar(l);
    if !f0.is_finite() {
        return Err(Error::NonFinite("gradient-check loss".into()));
    }
    let grads = tape.backward(l);
    let mut analytic = Vec::with_capacity(store.count());
    for (id, v) in store.ids().zip(bound.vars()) {
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(core::iter::repeat(0.0).take(store.get(id).len())),
        }
    }
    if opts.fault_injection {
        analytic.iter_mut().for_each(|g| *g *= 1.01);
    }

    let total = store.count();
    if total == 0 {
        return Err(Error::Degenerate("no trainable parameters to check".into()));
    }
    let mut rng = crate::rng::seeded(opts.seed);
    let picks: Vec<usize> = if opts.samples >= total {
        (0..total).collect()
    } else {
        let mut p = sample(&mut rng, total, opts.samples).into_vec();
        p.sort_unstable();
        p
    };

    let h = opts.step;
    let mut work = store.clone();
    let mut samples = Vec::with_capacity(picks.len());
    for &i in &picks {
        let orig = *work.scalar_mut(i).expect("index in range");
        *work.scalar_mut(i).expect("index") = orig + h;
        let fp = eval(&work)?;
        *work.scalar_mut(i).expect("index") = orig - h;
        let fm = eval(&work)?;
        *work.scalar_mut(i).expect("index") = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        let kinked = (fwd - bwd).abs() > (1e-3 * fwd.abs().max(bwd.abs())).max(1e-6);
        let a = analytic[i];
        samples.push(GradSample { index: i, analytic: a, numeric, rel_error: rel_error(a, numeric), kinked });
    }
    let smooth: Vec<&GradSample> = samples.iter().filter(|s| !s.kinked).collect();
    if smooth.is_empty() {
        return Err(Error::Degenerate("every probe hit a non-differentiable point".into()));
    }
    let max_rel_error = smooth.iter().map(|s| s.rel_error).fold(0.0, f64::max);
    let kinks = samples.len() - smooth.len();
    Ok(GradCheckReport {
        passed: max_rel_error <= opts.tolerance,
        samples,
        max_rel_error,
        kinks,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Block, BlockConfig, BlockKind, Gating, Linear};
    use crate::Tensor;

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| crate::rng::normal(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn linear_squared_loss_is_essentially_exact() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 5, 3, true, &mut crate::rng::seeded(1));
        let x = input(&[4, 5], 2);
        let y = input(&[4, 3], 3);
        let rep = gradient_check(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let yv = t.constant(y.clone());
                let out = lin.forward(t, p, xv)?;
                let d = t.sub(out, yv)?;
                let sq = t.square(d);
                Ok(t.sum(sq))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed);
        assert!(rep.max_rel_error <= 1e-8, "{}", rep.max_rel_error);
    }

    fn check_block(cfg: BlockConfig, x: Tensor<f64>, l1: bool) -> GradCheckReport {
        let mut store = ParamStore::<f64>::new();
        let block = Block::build(&cfg, &mut store, "b").unwrap();
        gradient_check(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let y = block.forward(t, p, xv)?;
                let y = if l1 { t.abs(y) } else { t.square(y) };
                Ok(t.mean(y))
            },
            GradCheckOptions { seed: cfg.seed, ..Default::default() },
        )
        .unwrap()
    }

    #[test]
    fn every_block_kind_passes() {
        let cases = [
            (BlockConfig::new(BlockKind::Mlp, &[6, 10, 4], Activation::Tanh, 1), input(&[3, 6], 10), false),
            (BlockConfig::new(BlockKind::ConvStack, &[2, 4, 3], Activation::LeakyRelu, 2), input(&[2, 2, 6, 6], 11), false),
            (BlockConfig::new(BlockKind::ResidualUnet, &[3, 4, 2], Activation::LeakyRelu, 3), input(&[1, 3, 8, 8], 12), true),
            (BlockConfig::new(BlockKind::RecurrentEncoder, &[4, 6], Activation::Tanh, 4), input(&[5, 4], 13), false),
            (
                BlockConfig::new(BlockKind::RecurrentEncoder, &[4, 6], Activation::Tanh, 5).with_gating(Gating::Gru),
                input(&[5, 4], 14),
                false,
            ),
            (BlockConfig::new(BlockKind::Discriminator, &[6, 8, 1], Activation::LeakyRelu, 6), input(&[4, 6], 15), false),
        ];
        for (cfg, x, l1) in cases {
            let kind = cfg.kind;
            let rep = check_block(cfg, x, l1);
            assert!(rep.passed, "{kind:?}: max rel error {}", rep.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_detected() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 3, 2, true, &mut crate::rng::seeded(1));
        let x = input(&[2, 3], 4);
        let rep = gradient_check(
            &store,
            |t, p| {
                let xv = t.constant(x.clone());
                let y = lin.forward(t, p, xv)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            },
            GradCheckOptions { fault_injection: true, ..Default::default() },
        )
        .unwrap();
        assert!(!rep.passed);
    }
}

//! Dynamic neural textures: a transcoder maps a CIEC to weights over `K`
//! learnable texture bases, and the frame texture is their weighted sum.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::ciec::{Ciec, NUM_TYPES};
use crate::nn::{Activation, Bound, Mlp, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::{shape_err_fmt, Real, Result, Tensor};

#[derive(Debug, Clone)]
pub struct DynamicTexture {
    pub transcoder: Mlp,
    pub bases: ParamId,
    pub k: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DynamicTexture {
    /// Registers `dyntex.transcoder.*` and `dyntex.bases` (`K x C*H*W`).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        k: usize,
        hidden: usize,
        channels: usize,
        size: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if k < 2 {
            return Err(shape_err_fmt!("need at least 2 texture bases, got {}", k));
        }
        let transcoder = Mlp::new(store, "dyntex.transcoder", &[NUM_TYPES, hidden, k], Activation::Tanh, rng);
        let n = channels * size * size;
        let bases = store.add_uniform("dyntex.bases", &[k, n], k, rng);
        Ok(Self { transcoder, bases, k, channels, height: size, width: size })
    }

    pub fn texel_count(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `B x 7` codes to `B x K` weights.
    pub fn texture_weights<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, ciec: Var) -> Result<Var> {
        self.transcoder.forward(tape, p, ciec)
    }

    /// `B x K` weights to `B x C x H x W` textures.
    pub fn blend_bases<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, weights: Var) -> Result<Var> {
        let s = tape.shape(weights).to_vec();
        if s.len() != 2 || s[1] != self.k {
            return Err(shape_err_fmt!("blend_bases expects B x {}, got {:?}", self.k, s));
        }
        let flat = tape.matmul(weights, p.var(self.bases))?;
        tape.reshape(flat, &[s[0], self.channels, self.height, self.width])
    }

    pub fn dynamic_texture<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, ciec: Var) -> Result<Var> {
        let w = self.texture_weights(tape, p, ciec)?;
        self.blend_bases(tape, p, w)
    }

    /// Inference helpers on frozen parameters.
    pub fn weights_of<T: Real>(&self, store: &ParamStore<T>, ciec: &Ciec) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, store, false);
        let x = tape.constant(ciec_tensor(&[*ciec]));
        let w = self.texture_weights(&mut tape, &p, x)?;
        Ok(tape.value(w).data().to_vec())
    }

    pub fn blend_of<T: Real>(&self, store: &ParamStore<T>, weights: &[T]) -> Result<Tensor<T>> {
        if weights.len() != self.k {
            return Err(shape_err_fmt!("expected {} weights, got {}", self.k, weights.len()));
        }
        let bases = store.get(self.bases).data();
        let n = self.texel_count();
        let mut out = alloc::vec![T::zero(); n];
        for (wk, row) in weights.iter().zip(bases.chunks_exact(n)) {
            for (o, b) in out.iter_mut().zip(row) {
                *o = *o + *wk * *b;
            }
        }
        Tensor::from_vec(&[self.channels, self.height, self.width], out)
    }

    pub fn texture_of<T: Real>(&self, store: &ParamStore<T>, ciec: &Ciec) -> Result<Tensor<T>> {
        let w = self.weights_of(store, ciec)?;
        self.blend_of(store, &w)
    }
}

/// Stacks codes into a `B x 7` tensor.
pub fn ciec_tensor<T: Real>(codes: &[Ciec]) -> Tensor<T> {
    let data = codes.iter().flat_map(|c| c.values().iter().map(|&v| T::c(v))).collect();
    Tensor::from_vec(&[codes.len(), NUM_TYPES], data).expect("sized")
}

/// Continuity statistics of a texture curve sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub step: f64,
    /// Largest L-infinity change between successive samples.
    pub max_jump: f64,
    pub median_jump: f64,
    /// `max_jump / step`: empirical Lipschitz constant.
    pub lipschitz: f64,
}

impl SweepReport {
    pub fn ratio(&self) -> f64 {
        if self.median_jump > 0.0 {
            self.max_jump / self.median_jump
        } else if self.max_jump == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    }
}

/// Evaluates `texture(t)` for `t = 0, step, ..., 1` and reports successive
/// L-infinity jumps.
pub fn intensity_sweep<F>(step: f64, mut texture: F) -> Result<SweepReport>
where
    F: FnMut(f64) -> Result<Vec<f64>>,
{
    let n = (1.0 / step).round() as usize;
    let mut prev = texture(0.0)?;
    let mut jumps = Vec::with_capacity(n);
    for i in 1..=n {
        let cur = texture((i as f64 * step).min(1.0))?;
        let j = prev.iter().zip(&cur).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        jumps.push(j);
        prev = cur;
    }
    let max_jump = jumps.iter().cloned().fold(0.0, f64::max);
    let mut sorted = jumps.clone();
    sorted.sort_by(f64::total_cmp);
    let median_jump = if sorted.is_empty() { 0.0 } else { sorted[sorted.len() / 2] };
    Ok(SweepReport { step, max_jump, median_jump, lipschitz: max_jump / step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ciec::ExpressionType;
    use crate::rng::seeded;

    fn model() -> (DynamicTexture, ParamStore<f64>) {
        let mut s = ParamStore::new();
        let d = DynamicTexture::new(&mut s, 4, 8, 2, 4, &mut seeded(1)).unwrap();
        (d, s)
    }

    #[test]
    fn unit_and_zero_weights() {
        let (d, s) = model();
        let bases = s.get(d.bases).data().to_vec();
        for k in 0..4 {
            let mut w = [0.0; 4];
            w[k] = 1.0;
            let t = d.blend_of(&s, &w).unwrap();
            assert_eq!(t.data(), &bases[k * 32..(k + 1) * 32]);
        }
        assert!(d.blend_of(&s, &[0.0; 4]).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn blend_is_linear() {
        let (d, s) = model();
        let (w1, w2) = ([0.3, -1.2, 0.5, 2.0], [1.1, 0.4, -0.7, 0.2]);
        let (a, b) = (0.7, -1.3);
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = d.blend_of(&s, &mix).unwrap();
        let (t1, t2) = (d.blend_of(&s, &w1).unwrap(), d.blend_of(&s, &w2).unwrap());
        for ((l, x), y) in lhs.data().iter().zip(t1.data()).zip(t2.data()) {
            assert!((l - (a * x + b * y)).abs() < 1e-6);
        }
    }

    #[test]
    fn tape_blend_matches_direct_blend() {
        let (d, s) = model();
        let c = Ciec::new(ExpressionType::Fear, 0.4).unwrap();
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &s, false);
        let x = tape.constant(ciec_tensor(&[c]));
        let t = d.dynamic_texture(&mut tape, &p, x).unwrap();
        let direct = d.texture_of(&s, &c).unwrap();
        assert!(tape.value(t).data().iter().zip(direct.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(tape.shape(t), &[1, 2, 4, 4]);
    }

    #[test]
    fn neutral_is_deterministic() {
        let (d, s) = model();
        let a = d.texture_of(&s, &Ciec::NEUTRAL).unwrap();
        let b = d.texture_of(&s, &Ciec::NEUTRAL).unwrap();
        assert_eq!(a, b);
        let w = d.weights_of(&s, &Ciec::NEUTRAL).unwrap();
        // zero input: the output is the transcoder's bias path
        assert_eq!(w.len(), 4);
    }

    #[test]
    fn sweep_of_a_line_is_uniform() {
        let r = intensity_sweep(1e-3, |t| Ok(alloc::vec![2.0 * t, -t])).unwrap();
        assert!((r.max_jump - 2e-3).abs() < 1e-12);
        assert!(r.ratio() < 1.0 + 1e-6);
        assert!((r.lipschitz - 2.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_single_basis() {
        let mut s = ParamStore::<f32>::new();
        assert!(DynamicTexture::new(&mut s, 1, 8, 2, 4, &mut seeded(1)).is_err());
    }
}

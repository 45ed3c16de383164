use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::{Real, Result};
use alloc::format;

/// Affine map `x W + b` on `N x in` rows; `W` is stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| store.add_zeros(&format!("{name}.b"), &[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, p.var(b), 1),
            None => Ok(y),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }
}

/// Square-kernel 2-D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = store.add_uniform(&format!("{name}.w"), &[c_out, c_in, kernel, kernel], fan_in, rng);
        let b = store.add_zeros(&format!("{name}.b"), &[c_out]);
        Self { w, b, c_in, c_out, kernel, stride, pad: kernel / 2 }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }

    pub fn parameter_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel + self.c_out
    }
}

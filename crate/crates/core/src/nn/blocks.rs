use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::{Bound, Conv, Linear, ParamStore};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    None,
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, T::c(0.1)),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Mlp,
    ConvStack,
    ResidualUnet,
    RecurrentEncoder,
    Discriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    #[default]
    Lstm,
    Gru,
}

/// Declarative description of one block.
///
/// `widths` is read per kind: `[in, hidden.., out]` for `mlp` and
/// `discriminator`, `[c_in, c1, .., cn]` for `conv_stack`,
/// `[c_in, base_width, c_out]` for `residual_unet` and `[in, hidden]` for
/// `recurrent_encoder`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub gating: Gating,
    pub seed: u64,
}

fn default_depth() -> usize {
    2
}

impl BlockConfig {
    pub fn new(kind: BlockKind, widths: &[usize], activation: Activation, seed: u64) -> Self {
        Self { kind, widths: widths.to_vec(), activation, depth: 2, gating: Gating::Lstm, seed }
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_gating(mut self, gating: Gating) -> Self {
        self.gating = gating;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|w| *w == 0) {
            return Err(Error::Config(format!("zero width in {:?}", self.widths)));
        }
        let need = match self.kind {
            BlockKind::Mlp | BlockKind::Discriminator => 2,
            BlockKind::ConvStack => 1,
            BlockKind::ResidualUnet => 3,
            BlockKind::RecurrentEncoder => 2,
        };
        let ok = match self.kind {
            BlockKind::ResidualUnet | BlockKind::RecurrentEncoder => self.widths.len() == need,
            _ => self.widths.len() >= need,
        };
        if !ok {
            return Err(Error::Config(format!("{:?} needs {} widths, got {:?}", self.kind, need, self.widths)));
        }
        if self.kind == BlockKind::ResidualUnet && self.depth == 0 {
            return Err(Error::Config("residual_unet depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fully connected stack with `activation` between layers and an optional
/// output nonlinearity.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    output: Activation,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation, output: Activation::None }
    }

    pub fn with_output(mut self, output: Activation) -> Self {
        self.output = output;
        self
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_dim() {
            return Err(shape_err_fmt!("mlp expects N x {}, got {:?}", self.in_dim(), s));
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            h = if i < last { self.activation.apply(tape, h) } else { self.output.apply(tape, h) };
        }
        Ok(h)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Linear::parameter_count).sum()
    }
}

/// Binary discriminator: an MLP ending in a sigmoid.
#[derive(Debug, Clone)]
pub struct Discriminator {
    mlp: Mlp,
}

impl Discriminator {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        Self { mlp: Mlp::new(store, name, widths, activation, rng).with_output(Activation::Sigmoid) }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        self.mlp.forward(tape, p, x)
    }

    pub fn parameter_count(&self) -> usize {
        self.mlp.parameter_count()
    }
}

/// Stride-1 3x3 convolutions with `activation` after each layer.
#[derive(Debug, Clone)]
pub struct ConvStack {
    convs: Vec<Conv>,
    activation: Activation,
}

impl ConvStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(store, &format!("{name}.{i}"), w[0], w[1], 3, 1, rng))
            .collect();
        Self { convs, activation }
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.convs.last().map(|c| c.c_out)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, p, h)?;
            h = self.activation.apply(tape, h);
        }
        Ok(h)
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(Conv::parameter_count).sum()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut SeededRng) -> Self {
        Self {
            a: Conv::new(store, &format!("{name}.a"), ch, ch, 3, 1, rng),
            b: Conv::new(store, &format!("{name}.b"), ch, ch, 3, 1, rng),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, act: Activation) -> Result<Var> {
        let h = self.a.forward(tape, p, x)?;
        let h = act.apply(tape, h);
        let h = self.b.forward(tape, p, h)?;
        tape.add(x, h)
    }

    fn parameter_count(&self) -> usize {
        self.a.parameter_count() + self.b.parameter_count()
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Conv,
    merge: Conv,
    res: ResBlock,
}

/// U-Net with residual blocks at every scale. Preserves spatial size and maps
/// `c_in` channels to `c_out`.
#[derive(Debug, Clone)]
pub struct ResidualUnet {
    stem: Conv,
    stem_res: ResBlock,
    down: Vec<(Conv, ResBlock)>,
    up: Vec<UpStage>,
    head: Conv,
    activation: Activation,
    c_in: usize,
    c_out: usize,
    depth: usize,
}

impl ResidualUnet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        width: usize,
        c_out: usize,
        depth: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let stem = Conv::new(store, &format!("{name}.stem"), c_in, width, 3, 1, rng);
        let stem_res = ResBlock::new(store, &format!("{name}.stem_res"), width, rng);
        let mut down = Vec::with_capacity(depth);
        for d in 1..=depth {
            let (ci, co) = (width << (d - 1), width << d);
            let conv = Conv::new(store, &format!("{name}.down{d}"), ci, co, 3, 2, rng);
            let res = ResBlock::new(store, &format!("{name}.down{d}_res"), co, rng);
            down.push((conv, res));
        }
        let mut up = Vec::with_capacity(depth);
        for d in (1..=depth).rev() {
            let (ci, co) = (width << d, width << (d - 1));
            up.push(UpStage {
                up: Conv::new(store, &format!("{name}.up{d}"), ci, co, 3, 1, rng),
                merge: Conv::new(store, &format!("{name}.merge{d}"), 2 * co, co, 3, 1, rng),
                res: ResBlock::new(store, &format!("{name}.up{d}_res"), co, rng),
            });
        }
        let head = Conv::new(store, &format!("{name}.head"), width, c_out, 1, 1, rng);
        Self { stem, stem_res, down, up, head, activation, c_in, c_out, depth }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let m = 1usize << self.depth;
        if s.len() != 4 || s[1] != self.c_in || s[2] % m != 0 || s[3] % m != 0 {
            return Err(shape_err_fmt!(
                "residual_unet expects N x {} x H x W with H, W divisible by {}, got {:?}",
                self.c_in,
                m,
                s
            ));
        }
        let act = self.activation;
        let h = self.stem.forward(tape, p, x)?;
        let h = act.apply(tape, h);
        let mut skips = vec![self.stem_res.forward(tape, p, h, act)?];
        for (conv, res) in &self.down {
            let prev = *skips.last().expect("non-empty");
            let h = conv.forward(tape, p, prev)?;
            let h = act.apply(tape, h);
            skips.push(res.forward(tape, p, h, act)?);
        }
        let mut h = skips.pop().expect("bottleneck");
        for stage in &self.up {
            let skip = skips.pop().expect("matching skip");
            let u = tape.upsample2x(h)?;
            let u = stage.up.forward(tape, p, u)?;
            let u = act.apply(tape, u);
            let cat = tape.concat(&[u, skip], 1)?;
            let u = stage.merge.forward(tape, p, cat)?;
            let u = act.apply(tape, u);
            h = stage.res.forward(tape, p, u, act)?;
        }
        self.head.forward(tape, p, h)
    }

    pub fn parameter_count(&self) -> usize {
        self.stem.parameter_count()
            + self.stem_res.parameter_count()
            + self.down.iter().map(|(c, r)| c.parameter_count() + r.parameter_count()).sum::<usize>()
            + self
                .up
                .iter()
                .map(|s| s.up.parameter_count() + s.merge.parameter_count() + s.res.parameter_count())
                .sum::<usize>()
            + self.head.parameter_count()
    }
}

/// Causal recurrent encoder over a `T x in` sequence, producing `T x hidden`.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    input: Linear,
    recurrent: Linear,
    /// GRU keeps a separate recurrent bias for the candidate gate.
    recurrent_bias: Option<crate::nn::ParamId>,
    gating: Gating,
    in_dim: usize,
    hidden: usize,
}

impl RecurrentEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        gating: Gating,
        rng: &mut SeededRng,
    ) -> Self {
        let gates = match gating {
            Gating::Lstm => 4,
            Gating::Gru => 3,
        };
        let input = Linear::new(store, &format!("{name}.ih"), in_dim, gates * hidden, true, rng);
        let recurrent = Linear::new(store, &format!("{name}.hh"), hidden, gates * hidden, false, rng);
        if gating == Gating::Lstm {
            // forget-gate bias of one keeps early gradients alive
            let b = store.get_mut(input.b.expect("bias")).data_mut();
            b[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        }
        let recurrent_bias =
            (gating == Gating::Gru).then(|| store.add_zeros(&format!("{name}.hh.b"), &[gates * hidden]));
        Self { input, recurrent, recurrent_bias, gating, in_dim, hidden }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_state(tape, p, x, None)?.0)
    }

    /// Runs from an explicit `(h, c)` state (zeros when `None`) and returns the
    /// outputs with the final state, so a sequence can be fed in pieces.
    pub fn forward_state<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, (Var, Var))> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.in_dim || s[0] == 0 {
            return Err(shape_err_fmt!("recurrent encoder expects T x {}, got {:?}", self.in_dim, s));
        }
        let hd = self.hidden;
        // Input projections for every step at once.
        let xin = self.input.forward(tape, p, x)?;
        let (mut h, mut c) = match state {
            Some(st) => st,
            None => (tape.constant(Tensor::zeros(&[1, hd])), tape.constant(Tensor::zeros(&[1, hd]))),
        };
        let mut outs = Vec::with_capacity(s[0]);
        for t in 0..s[0] {
            let xt = tape.slice(xin, 0, t, 1)?;
            let hh = self.recurrent.forward(tape, p, h)?;
            match self.gating {
                Gating::Lstm => {
                    let z = tape.add(xt, hh)?;
                    let i = tape.slice(z, 1, 0, hd)?;
                    let f = tape.slice(z, 1, hd, hd)?;
                    let g = tape.slice(z, 1, 2 * hd, hd)?;
                    let o = tape.slice(z, 1, 3 * hd, hd)?;
                    let i = tape.sigmoid(i);
                    let f = tape.sigmoid(f);
                    let g = tape.tanh(g);
                    let o = tape.sigmoid(o);
                    let fc = tape.mul(f, c)?;
                    let ig = tape.mul(i, g)?;
                    c = tape.add(fc, ig)?;
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc)?;
                }
                Gating::Gru => {
                    let hh = tape.add_bias(hh, p.var(self.recurrent_bias.expect("gru bias")), 1)?;
                    let xr = tape.slice(xt, 1, 0, hd)?;
                    let xz = tape.slice(xt, 1, hd, hd)?;
                    let xn = tape.slice(xt, 1, 2 * hd, hd)?;
                    let hr = tape.slice(hh, 1, 0, hd)?;
                    let hz = tape.slice(hh, 1, hd, hd)?;
                    let hn = tape.slice(hh, 1, 2 * hd, hd)?;
                    let r = tape.add(xr, hr)?;
                    let r = tape.sigmoid(r);
                    let z = tape.add(xz, hz)?;
                    let z = tape.sigmoid(z);
                    let rn = tape.mul(r, hn)?;
                    let n = tape.add(xn, rn)?;
                    let n = tape.tanh(n);
                    // h = n + z * (h - n)
                    let d = tape.sub(h, n)?;
                    let zd = tape.mul(z, d)?;
                    h = tape.add(n, zd)?;
                }
            }
            outs.push(h);
        }
        Ok((tape.concat(&outs, 0)?, (h, c)))
    }

    pub fn parameter_count(&self) -> usize {
        self.input.parameter_count()
            + self.recurrent.parameter_count()
            + if self.recurrent_bias.is_some() { 3 * self.hidden } else { 0 }
    }
}

/// Any block buildable from a [`BlockConfig`].
#[derive(Debug, Clone)]
pub enum Block {
    Mlp(Mlp),
    ConvStack(ConvStack),
    ResidualUnet(ResidualUnet),
    RecurrentEncoder(RecurrentEncoder),
    Discriminator(Discriminator),
}

impl Block {
    pub fn build<T: Real>(cfg: &BlockConfig, store: &mut ParamStore<T>, name: &str) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::seeded(cfg.seed);
        let w = &cfg.widths;
        Ok(match cfg.kind {
            BlockKind::Mlp => Block::Mlp(Mlp::new(store, name, w, cfg.activation, &mut rng)),
            BlockKind::ConvStack => Block::ConvStack(ConvStack::new(store, name, w, cfg.activation, &mut rng)),
            BlockKind::ResidualUnet => Block::ResidualUnet(ResidualUnet::new(
                store,
                name,
                w[0],
                w[1],
                w[2],
                cfg.depth,
                cfg.activation,
                &mut rng,
            )),
            BlockKind::RecurrentEncoder => Block::RecurrentEncoder(RecurrentEncoder::new(
                store,
                name,
                w[0],
                w[1],
                cfg.gating,
                &mut rng,
            )),
            BlockKind::Discriminator => {
                Block::Discriminator(Discriminator::new(store, name, w, cfg.activation, &mut rng))
            }
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Block::Mlp(b) => b.forward(tape, p, x),
            Block::ConvStack(b) => b.forward(tape, p, x),
            Block::ResidualUnet(b) => b.forward(tape, p, x),
            Block::RecurrentEncoder(b) => b.forward(tape, p, x),
            Block::Discriminator(b) => b.forward(tape, p, x),
        }
    }

    pub fn count_parameters(&self) -> usize {
        match self {
            Block::Mlp(b) => b.parameter_count(),
            Block::ConvStack(b) => b.parameter_count(),
            Block::ResidualUnet(b) => b.parameter_count(),
            Block::RecurrentEncoder(b) => b.parameter_count(),
            Block::Discriminator(b) => b.parameter_count(),
        }
    }
}

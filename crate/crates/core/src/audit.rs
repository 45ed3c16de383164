//! Finite-difference audit of every trainable module on small 64-bit
//! instances, as run by `dntx gradcheck`.

use alloc::string::String;
use alloc::vec::Vec;

use crate::audio_exp::{audio_loss, AudioExpNet, AudioLossWeights, GeometryOperator};
use crate::ciec::{Ciec, ExpressionType};
use crate::decouple::{loss_adv, loss_landmarks, loss_neutral, rows_tensor, DecoupleLossWeights, DecoupleNets, LandmarkOperator};
use crate::dyntex::{ciec_tensor, DynamicTexture};
use crate::nn::{gradient_check, Activation, Block, BlockConfig, BlockKind, Gating, GradCheckOptions, GradCheckReport, ParamStore};
use crate::pipeline::{FrameInput, Model, ModelConfig};
use crate::render::RenderNet;
use crate::rng::{derive, normal, seeded, uniform};
use crate::synth::{generate_clip, ClipSpec, DatasetConfig};
use crate::tape::{Tape, Var};
use crate::teeth::TeethNet;
use crate::{Result, Tensor};

/// Module names in audit order.
pub const AUDIT_MODULES: [&str; 13] = [
    "mlp",
    "conv_stack",
    "residual_unet",
    "recurrent_lstm",
    "recurrent_gru",
    "discriminator",
    "dyntex",
    "teeth",
    "render",
    "decouple",
    "audio_exp",
    "perceptual",
    "pipeline",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub module: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| normal(&mut rng)).collect()).expect("shape")
}

/// Image-like values around 0.5.
fn shifted(shape: &[usize], seed: u64) -> Tensor<f64> {
    let t = random(shape, seed);
    let data = t.data().iter().map(|v| 0.5 + 0.15 * v).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn square_mean(t: &mut Tape<f64>, y: Var) -> Var {
    let s = t.square(y);
    t.mean(s)
}

fn block(cfg: BlockConfig, x: Tensor<f64>, l1: bool, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let b = Block::build(&cfg, &mut store, "b")?;
    gradient_check(
        &store,
        |t, p| {
            let xv = t.constant(x.clone());
            let y = b.forward(t, p, xv)?;
            if l1 {
                let a = t.abs(y);
                Ok(t.mean(a))
            } else {
                Ok(square_mean(t, y))
            }
        },
        opts,
    )
}

/// Small model and two prepared frames at 16 x 16.
fn small_pipeline() -> Result<(ModelConfig, Vec<FrameInput<f64>>)> {
    let m = ModelConfig {
        texture_channels: 2,
        bases: 3,
        texture_size: 8,
        transcoder_hidden: 4,
        unet_width: 2,
        unet_depth: 1,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    };
    let d = DatasetConfig { frames: 2, height: 16, width: 16, texture_size: 8, ..DatasetConfig::default() };
    let basis = d.basis()?;
    let camera = d.camera()?;
    let clip = generate_clip(&d, &basis, ClipSpec { expression: ExpressionType::Happy, level: 3, slot: 0 })?;
    let mut frames = Vec::new();
    for t in 0..2 {
        frames.push(FrameInput::<f32>::prepare(&basis, &camera, &clip.params(t), clip.ciec(), &clip.frames[t], d.texture_size)?.cast());
    }
    Ok((m, frames))
}

fn codes() -> Tensor<f64> {
    ciec_tensor(&[Ciec::new(ExpressionType::Happy, 0.7).expect("valid"), Ciec::new(ExpressionType::Sad, 0.3).expect("valid")])
}

fn check_module(name: &str, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let seed = opts.seed;
    match name {
        "mlp" => block(BlockConfig::new(BlockKind::Mlp, &[6, 10, 4], Activation::Tanh, seed), random(&[3, 6], 10), false, opts),
        "conv_stack" => {
            block(BlockConfig::new(BlockKind::ConvStack, &[2, 4, 3], Activation::LeakyRelu, seed), random(&[2, 2, 6, 6], 11), false, opts)
        }
        "residual_unet" => {
            block(BlockConfig::new(BlockKind::ResidualUnet, &[3, 4, 2], Activation::LeakyRelu, seed), random(&[1, 3, 8, 8], 12), true, opts)
        }
        "recurrent_lstm" => {
            block(BlockConfig::new(BlockKind::RecurrentEncoder, &[4, 6], Activation::Tanh, seed), random(&[5, 4], 13), false, opts)
        }
        "recurrent_gru" => block(
            BlockConfig::new(BlockKind::RecurrentEncoder, &[4, 6], Activation::Tanh, seed).with_gating(Gating::Gru),
            random(&[5, 4], 14),
            false,
            opts,
        ),
        "discriminator" => {
            block(BlockConfig::new(BlockKind::Discriminator, &[6, 8, 1], Activation::LeakyRelu, seed), random(&[4, 6], 15), false, opts)
        }
        "dyntex" => {
            let mut store = ParamStore::<f64>::new();
            let dt = DynamicTexture::new(&mut store, 3, 5, 2, 4, &mut derive(seed, 1))?;
            let c = codes();
            gradient_check(
                &store,
                |t, p| {
                    let cv = t.constant(c.clone());
                    let tex = dt.dynamic_texture(t, p, cv)?;
                    Ok(square_mean(t, tex))
                },
                opts,
            )
        }
        "teeth" => {
            let (m, frames) = small_pipeline()?;
            let mut store = ParamStore::<f64>::new();
            let net = TeethNet::new(&mut store, m.texture_channels, m.height, m.width, 2, 1, &mut derive(seed, 2));
            let x = random(&[2, m.texture_channels, m.height, m.width], 16);
            let warps: Vec<_> = frames.iter().map(|f| f.teeth.clone()).collect();
            let c = codes();
            gradient_check(
                &store,
                |t, p| {
                    let (xv, cv) = (t.constant(x.clone()), t.constant(c.clone()));
                    let y = net.forward(t, p, xv, cv, &warps)?;
                    let a = t.abs(y);
                    Ok(t.mean(a))
                },
                opts,
            )
        }
        "render" => {
            let mut store = ParamStore::<f64>::new();
            let net = RenderNet::new(&mut store, 3, 2, 1, &mut derive(seed, 3));
            let (f, bg) = (random(&[2, 3, 8, 8], 17), shifted(&[2, 3, 8, 8], 18));
            let target = shifted(&[2, 3, 8, 8], 19);
            gradient_check(
                &store,
                |t, p| {
                    let (fv, bv, tv) = (t.constant(f.clone()), t.constant(bg.clone()), t.constant(target.clone()));
                    let out = net.forward(t, p, fv, bv)?;
                    let d = t.sub(out.composite, tv)?;
                    Ok(square_mean(t, d))
                },
                opts,
            )
        }
        "decouple" => {
            let basis = DatasetConfig::default().basis()?;
            let mut store = ParamStore::<f64>::new();
            let nets = DecoupleNets::new(&mut store, &mut derive(seed, 4));
            // away from the identity map so every weight carries gradient
            let last = nets.fd.layers().last().expect("two layers").w;
            let mut rng = seeded(seed ^ 0x5eed);
            store.get_mut(last).data_mut().iter_mut().for_each(|v| *v = uniform(&mut rng, -0.05, 0.05));
            let lm = LandmarkOperator::mouth(&basis);
            let rows = |s: u64| -> Vec<Vec<f64>> {
                let mut r = seeded(s);
                (0..6).map(|_| (0..crate::face::N_BETA).map(|_| 0.3 * normal(&mut r)).collect()).collect()
            };
            let (n, a) = (rows(20), rows(21));
            let w = DecoupleLossWeights::default();
            gradient_check(
                &store,
                |t, p| {
                    let (vn, va) = (t.constant(rows_tensor(&n)?), t.constant(rows_tensor(&a)?));
                    let adv = loss_adv(t, &nets, p, vn, va)?;
                    let neu = loss_neutral(t, &nets, p, vn)?;
                    let lmk = loss_landmarks(t, &nets, p, va, &lm)?;
                    let neu = t.scale(neu, w.lambda1);
                    let lmk = t.scale(lmk, w.lambda2);
                    let x = t.add(adv, neu)?;
                    t.add(x, lmk)
                },
                opts,
            )
        }
        "audio_exp" => {
            let mut store = ParamStore::<f64>::new();
            let net = AudioExpNet::new(&mut store, &mut derive(seed, 5));
            let a = random(&[4, crate::synth::AUDIO_DIM], 4);
            let c = ciec_tensor(&[Ciec::new(ExpressionType::Happy, 0.7).expect("valid"); 4]);
            let g = random(&[4, crate::face::N_BETA], 5);
            let op = GeometryOperator::from_parts(random(&[crate::face::N_BETA, 6], 6), alloc::vec![3.0, 3.0, 3.0, 1.0, 1.0, 1.0])?;
            gradient_check(
                &store,
                |t, p| {
                    let (va, vc, vg) = (t.constant(a.clone()), t.constant(c.clone()), t.constant(g.clone()));
                    let y = net.predict(t, p, va, vc)?;
                    Ok(audio_loss(t, y, vg, &op, AudioLossWeights::default())?.total)
                },
                opts,
            )
        }
        "perceptual" => {
            // the extractor is frozen, so audit its input gradient through a
            // single trainable image
            let ex = crate::train::PerceptualExtractor::new(seed);
            let mut store = ParamStore::<f64>::new();
            let img = store.add("image", shifted(&[1, 3, 8, 8], 22));
            let target = shifted(&[1, 3, 8, 8], 23);
            gradient_check(
                &store,
                |t, p| {
                    let tv = t.constant(target.clone());
                    crate::train::perceptual_loss(t, &ex, crate::train::PerceptualMode::RandomFeatures, p.var(img), tv)
                },
                opts,
            )
        }
        "pipeline" => {
            let (m, frames) = small_pipeline()?;
            let mut store = ParamStore::<f64>::new();
            let model = Model::new(&m, &mut store)?;
            let target: Tensor<f64> = Tensor::full(&[2, 3, m.height, m.width], 0.4);
            gradient_check(
                &store,
                |t, p| {
                    let out = model.forward(t, p, &frames)?;
                    let tv = t.constant(target.clone());
                    let d = t.sub(out.composite, tv)?;
                    Ok(square_mean(t, d))
                },
                opts,
            )
        }
        other => Err(crate::Error::Config(alloc::format!("unknown audit module {other:?}"))),
    }
}

/// Runs the audit for `modules` (all when empty).
pub fn gradient_audit(modules: &[&str], opts: GradCheckOptions) -> Result<Vec<AuditEntry>> {
    let names: Vec<&str> = if modules.is_empty() { AUDIT_MODULES.to_vec() } else { modules.to_vec() };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let report = check_module(name, opts)?;
        out.push(AuditEntry { module: name.into(), report });
    }
    Ok(out)
}

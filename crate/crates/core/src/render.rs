//! Neural renderer: background features, a residual U-Net emitting a facial
//! image and an attention mask, and the per-pixel blend
//! `I' = B * (1 - alpha) + F * alpha`.

use alloc::vec::Vec;

use crate::nn::{Activation, Bound, ConvStack, ParamStore, ResidualUnet};
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::{shape_err_fmt, Error, Real, Result, Tensor};

pub const BACKGROUND_CHANNELS: usize = 8;

#[derive(Debug, Clone)]
pub struct RenderNet {
    pub bgcnn: ConvStack,
    pub unet: ResidualUnet,
    pub face_channels: usize,
    /// Test hook: replaces the predicted mask by a constant.
    pub alpha_override: Option<f64>,
}

/// Tape handles of one rendered batch.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    pub composite: Var,
    pub face: Var,
    pub alpha: Var,
}

impl RenderNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        face_channels: usize,
        unet_width: usize,
        depth: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let bgcnn = ConvStack::new(store, "render.bgcnn", &[3, BACKGROUND_CHANNELS], Activation::LeakyRelu, rng);
        let unet = ResidualUnet::new(
            store,
            "render.unet",
            face_channels + BACKGROUND_CHANNELS,
            unet_width,
            4,
            depth,
            Activation::LeakyRelu,
            rng,
        );
        Self { bgcnn, unet, face_channels, alpha_override: None }
    }

    /// `fused`: `B x C_f x H x W` face features; `background`: `B x 3 x H x W`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, fused: Var, background: Var) -> Result<RenderVars> {
        let (fs, bs) = (tape.shape(fused).to_vec(), tape.shape(background).to_vec());
        if fs.len() != 4 || fs[1] != self.face_channels || bs.len() != 4 || bs[1] != 3 || fs[0] != bs[0] || fs[2..] != bs[2..] {
            return Err(shape_err_fmt!(
                "renderer expects B x {} x H x W features and B x 3 x H x W background, got {:?} and {:?}",
                self.face_channels,
                fs,
                bs
            ));
        }
        let bg = self.bgcnn.forward(tape, p, background)?;
        let x = tape.concat(&[fused, bg], 1)?;
        let y = self.unet.forward(tape, p, x)?;
        let rgb = tape.slice(y, 1, 0, 3)?;
        let face = tape.sigmoid(rgb);
        let alpha = match self.alpha_override {
            Some(a) => tape.constant(Tensor::full(&[bs[0], 1, bs[2], bs[3]], T::c(a))),
            None => {
                let logit = tape.slice(y, 1, 3, 1)?;
                tape.sigmoid(logit)
            }
        };
        let composite = blend_vars(tape, background, face, alpha)?;
        Ok(RenderVars { composite, face, alpha })
    }
}

/// Tape form of the blend; `alpha` is `B x 1 x H x W`.
pub fn blend_vars<T: Real>(tape: &mut Tape<T>, b: Var, f: Var, alpha: Var) -> Result<Var> {
    let a3 = tape.concat(&[alpha, alpha, alpha], 1)?;
    let keep = tape.one_minus(a3);
    let back = tape.mul(b, keep)?;
    let front = tape.mul(f, a3)?;
    tape.add(back, front)
}

/// `B * (1 - alpha) + F * alpha` per pixel; `alpha` has one value per pixel
/// and is shared by the color channels.
pub fn blend<T: Real>(b: &Tensor<T>, f: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let s = b.shape();
    if f.shape() != s || s.len() != 3 || alpha.shape() != [1, s[1], s[2]] {
        return Err(shape_err_fmt!(
            "blend needs C x H x W images and a 1 x H x W mask, got {:?}, {:?}, {:?}",
            s,
            f.shape(),
            alpha.shape()
        ));
    }
    if alpha.data().iter().any(|a| !(*a >= T::zero() && *a <= T::one())) {
        return Err(Error::Config("attention mask outside [0, 1]".into()));
    }
    let hw = s[1] * s[2];
    let data: Vec<T> = b
        .data()
        .iter()
        .zip(f.data())
        .enumerate()
        .map(|(i, (&bv, &fv))| {
            let a = alpha.data()[i % hw];
            bv * (T::one() - a) + fv * a
        })
        .collect();
    Tensor::from_vec(s, data)
}

/// Zeroes the face and teeth pixels of a `3 x H x W` frame.
pub fn mask_background(frame: &Tensor<f32>, face: &[bool], teeth: &[bool]) -> Result<Tensor<f32>> {
    let s = frame.shape();
    let hw = s.get(1).copied().unwrap_or(0) * s.get(2).copied().unwrap_or(0);
    if s.len() != 3 || face.len() != hw || teeth.len() != hw {
        return Err(shape_err_fmt!("mask sizes {} / {} do not match frame {:?}", face.len(), teeth.len(), s));
    }
    let mut out = frame.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let px = i % hw;
        if face[px] || teeth[px] {
            *v = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    fn rand_img(seed: u64, c: usize) -> Tensor<f64> {
        let mut r = seeded(seed);
        Tensor::from_vec(&[c, 4, 5], (0..c * 20).map(|_| uniform(&mut r, 0.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let (b, f) = (rand_img(1, 3), rand_img(2, 3));
        assert_eq!(blend(&b, &f, &Tensor::zeros(&[1, 4, 5])).unwrap(), b);
        assert_eq!(blend(&b, &f, &Tensor::full(&[1, 4, 5], 1.0)).unwrap(), f);
        let half = blend(&Tensor::full(&[3, 4, 5], 0.2f64), &Tensor::full(&[3, 4, 5], 0.6), &Tensor::full(&[1, 4, 5], 0.5)).unwrap();
        assert!(half.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn blend_identity_and_convexity() {
        let (b, f, a) = (rand_img(3, 3), rand_img(4, 3), rand_img(5, 1));
        let x = blend(&b, &f, &a).unwrap();
        let y = blend(&f, &b, &a).unwrap();
        for i in 0..60 {
            let (bv, fv) = (b.data()[i], f.data()[i]);
            assert!((x.data()[i] + y.data()[i] - bv - fv).abs() < 1e-6);
            assert!(x.data()[i] >= bv.min(fv) - 1e-12 && x.data()[i] <= bv.max(fv) + 1e-12);
        }
        assert!(blend(&b, &f, &Tensor::full(&[1, 4, 5], 1.5)).is_err());
    }

    #[test]
    fn background_masking() {
        let frame = Tensor::full(&[3, 2, 2], 0.7f32);
        let none = alloc::vec![false; 4];
        assert_eq!(mask_background(&frame, &none, &none).unwrap(), frame);
        let all = alloc::vec![true; 4];
        assert!(mask_background(&frame, &all, &none).unwrap().data().iter().all(|v| *v == 0.0));
        let teeth = alloc::vec![false, true, false, false];
        let b = mask_background(&frame, &none, &teeth).unwrap();
        assert_eq!((b.data()[1], b.data()[5], b.data()[9]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn forced_alpha_selects_inputs_bitwise() {
        let mut store = ParamStore::<f64>::new();
        let mut net = RenderNet::new(&mut store, 6, 4, 1, &mut seeded(9));
        for (a, pick_face) in [(0.0, false), (1.0, true)] {
            net.alpha_override = Some(a);
            let mut tape = Tape::new();
            let p = Bound::new(&mut tape, &store, false);
            let feats = tape.constant(Tensor::full(&[1, 6, 8, 8], 0.3));
            let mut r = seeded(4);
            let bgv: Vec<f64> = (0..192).map(|_| uniform(&mut r, 0.0, 1.0)).collect();
            let bg = tape.constant(Tensor::from_vec(&[1, 3, 8, 8], bgv).unwrap());
            let out = net.forward(&mut tape, &p, feats, bg).unwrap();
            let want = if pick_face { out.face } else { bg };
            assert_eq!(tape.value(out.composite).data(), tape.value(want).data());
        }
    }
}

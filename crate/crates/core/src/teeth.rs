//! Teeth submodule: zoom the sampled features onto the mouth opening,
//! complete them with a CIEC-conditioned network, and warp back.

use alloc::sync::Arc;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::ciec::NUM_TYPES;
use crate::nn::{Activation, Bound, Linear, ParamStore, ResidualUnet};
use crate::rng::SeededRng;
use crate::tape::{ResamplePlan, Tape, Var};
use crate::{shape_err_fmt, Real, Result};

/// Channels the rearranged CIEC occupies next to the warped features.
pub const CIEC_PLANES: usize = 4;

/// Translation plus isotropic scale, `p' = s * p + t`, in continuous pixel
/// coordinates (pixel `(x, y)` is centered at `(x + 0.5, y + 0.5)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFocus {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineFocus {
    pub const IDENTITY: AffineFocus = AffineFocus { scale: 1.0, tx: 0.0, ty: 0.0 };

    pub fn new(scale: f64, tx: f64, ty: f64) -> Result<Self> {
        if !(scale > 0.0) || !tx.is_finite() || !ty.is_finite() || !scale.is_finite() {
            return Err(shape_err_fmt!("invalid affine focus s={} t=({}, {})", scale, tx, ty));
        }
        Ok(Self { scale, tx, ty })
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        [[self.scale, 0.0, self.tx], [0.0, self.scale, self.ty]]
    }

    pub fn inverse(&self) -> AffineFocus {
        AffineFocus { scale: 1.0 / self.scale, tx: -self.tx / self.scale, ty: -self.ty / self.scale }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [self.scale * p[0] + self.tx, self.scale * p[1] + self.ty]
    }

    pub fn unapply(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.tx) / self.scale, (p[1] - self.ty) / self.scale]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TeethFocus {
    pub affine: AffineFocus,
    /// The mask was empty (closed mouth) and the identity is used.
    pub empty_teeth: bool,
}

/// Focus that moves the mask centroid to the image center and scales the
/// mask's bounding box to half the frame, with the scale clamped to `[1, 8]`.
pub fn teeth_affine(mask: &[bool], h: usize, w: usize) -> Result<TeethFocus> {
    if mask.len() != h * w {
        return Err(shape_err_fmt!("mask has {} pixels, expected {}x{}", mask.len(), h, w));
    }
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    let (mut x0, mut x1, mut y0, mut y1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (x, y) = (i % w, i / w);
        sx += x as f64 + 0.5;
        sy += y as f64 + 0.5;
        n += 1;
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if n == 0 {
        return Ok(TeethFocus { affine: AffineFocus::IDENTITY, empty_teeth: true });
    }
    let (cx, cy) = (sx / n as f64, sy / n as f64);
    let (bw, bh) = ((x1 - x0 + 1) as f64, (y1 - y0 + 1) as f64);
    let s = (0.5 * (w as f64 / bw).min(h as f64 / bh)).clamp(1.0, 8.0);
    let (ox, oy) = (w as f64 / 2.0, h as f64 / 2.0);
    Ok(TeethFocus { affine: AffineFocus::new(s, ox - s * cx, oy - s * cy)?, empty_teeth: false })
}

/// Bilinear taps at continuous pixel position `(x, y)` with zero padding.
fn zero_padded_taps<T: Real>(x: f64, y: f64, h: usize, w: usize) -> [(u32, T); 4] {
    let (px, py) = (x - 0.5, y - 0.5);
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut taps = [(0u32, T::zero()); 4];
    let corners = [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1.0, y0, fx * (1.0 - fy)), (x0, y0 + 1.0, (1.0 - fx) * fy), (x0 + 1.0, y0 + 1.0, fx * fy)];
    for (slot, (cx, cy, wgt)) in taps.iter_mut().zip(corners) {
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 && wgt != 0.0 {
            *slot = ((cy as usize * w + cx as usize) as u32, T::c(wgt));
        }
    }
    taps
}

fn plan_for<T: Real>(h: usize, w: usize, src_of: impl Fn([f64; 2]) -> [f64; 2]) -> ResamplePlan<T> {
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = src_of([x as f64 + 0.5, y as f64 + 0.5]);
            taps.push(zero_padded_taps(p[0], p[1], h, w));
        }
    }
    ResamplePlan::new(h, w, h, w, taps).expect("taps are in range")
}

/// Resampling that produces the focused view: output `q` reads input at
/// `A^-1 q`.
pub fn warp_plan<T: Real>(a: &AffineFocus, h: usize, w: usize) -> ResamplePlan<T> {
    plan_for(h, w, |q| a.unapply(q))
}

/// Resampling back from the focused view: output `p` reads input at `A p`.
pub fn inverse_warp_plan<T: Real>(a: &AffineFocus, h: usize, w: usize) -> ResamplePlan<T> {
    plan_for(h, w, |p| a.apply(p))
}

pub fn warp<T: Real>(features: &[T], a: &AffineFocus, h: usize, w: usize) -> Vec<T> {
    let mut out = alloc::vec![T::zero(); features.len()];
    warp_plan::<T>(a, h, w).apply(features, &mut out);
    out
}

pub fn inverse_warp<T: Real>(features: &[T], a: &AffineFocus, h: usize, w: usize) -> Vec<T> {
    let mut out = alloc::vec![T::zero(); features.len()];
    inverse_warp_plan::<T>(a, h, w).apply(features, &mut out);
    out
}

/// Per-frame warp pair.
#[derive(Debug, Clone)]
pub struct TeethWarp<T> {
    pub focus: TeethFocus,
    pub warp: Arc<ResamplePlan<T>>,
    pub unwarp: Arc<ResamplePlan<T>>,
}

impl<T: Real> TeethWarp<T> {
    pub fn from_mask(mask: &[bool], h: usize, w: usize) -> Result<Self> {
        let focus = teeth_affine(mask, h, w)?;
        Ok(Self {
            focus,
            warp: Arc::new(warp_plan(&focus.affine, h, w)),
            unwarp: Arc::new(inverse_warp_plan(&focus.affine, h, w)),
        })
    }

    pub fn cast<U: Real>(&self) -> TeethWarp<U> {
        TeethWarp { focus: self.focus, warp: Arc::new(self.warp.cast()), unwarp: Arc::new(self.unwarp.cast()) }
    }
}

#[derive(Debug, Clone)]
pub struct TeethNet {
    pub fc: Linear,
    pub unet: ResidualUnet,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TeethNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        channels: usize,
        height: usize,
        width: usize,
        unet_width: usize,
        depth: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fc = Linear::new(store, "teeth.fc", NUM_TYPES, CIEC_PLANES * height * width, true, rng);
        let unet = ResidualUnet::new(store, "teeth.unet", channels + CIEC_PLANES, unet_width, channels, depth, Activation::LeakyRelu, rng);
        Self { fc, unet, channels, height, width }
    }

    /// `B x C x H x W` focused features and `B x 7` codes to completed
    /// features of the same shape.
    pub fn complete_teeth<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, warped: Var, ciec: Var) -> Result<Var> {
        let s = tape.shape(warped).to_vec();
        if s.len() != 4 || s[1] != self.channels || s[2] != self.height || s[3] != self.width {
            return Err(shape_err_fmt!(
                "complete_teeth expects B x {} x {} x {}, got {:?}",
                self.channels,
                self.height,
                self.width,
                s
            ));
        }
        let planes = self.fc.forward(tape, p, ciec)?;
        let planes = tape.reshape(planes, &[s[0], CIEC_PLANES, s[2], s[3]])?;
        let x = tape.concat(&[warped, planes], 1)?;
        self.unet.forward(tape, p, x)
    }

    /// `[sampled | unwarp(complete(warp(sampled)))]`, `B x 2C x H x W`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, sampled: Var, ciec: Var, warps: &[TeethWarp<T>]) -> Result<Var> {
        let b = tape.shape(sampled)[0];
        if warps.len() != b {
            return Err(shape_err_fmt!("{} teeth warps for a batch of {}", warps.len(), b));
        }
        let focused = per_frame(tape, sampled, warps.iter().map(|w| w.warp.clone()))?;
        let done = self.complete_teeth(tape, p, focused, ciec)?;
        let back = per_frame(tape, done, warps.iter().map(|w| w.unwarp.clone()))?;
        tape.concat(&[sampled, back], 1)
    }
}

/// Applies one plan per batch element.
pub fn per_frame<T: Real>(tape: &mut Tape<T>, x: Var, plans: impl Iterator<Item = Arc<ResamplePlan<T>>>) -> Result<Var> {
    let mut parts = Vec::new();
    for (i, plan) in plans.enumerate() {
        let xi = tape.slice(x, 0, i, 1)?;
        parts.push(tape.resample(xi, plan)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::Tensor;

    fn square_mask(n: usize, x0: usize, y0: usize, side: usize) -> Vec<bool> {
        let mut m = alloc::vec![false; n * n];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m[y * n + x] = true;
            }
        }
        m
    }

    #[test]
    fn centered_half_frame_mask_is_identity() {
        let f = teeth_affine(&square_mask(64, 16, 16, 32), 64, 64).unwrap();
        assert!(!f.empty_teeth);
        assert_eq!(f.affine, AffineFocus::IDENTITY);
    }

    #[test]
    fn off_center_mask_translates_centroid() {
        // 2x2 block centered at (16, 16)
        let f = teeth_affine(&square_mask(64, 15, 15, 2), 64, 64).unwrap();
        let a = f.affine;
        assert_eq!(a.scale, 8.0);
        assert_eq!(a.apply([16.0, 16.0]), [32.0, 32.0]);
        // translation before scaling is the centroid offset
        assert_eq!(((32.0 - a.tx) / a.scale, (32.0 - a.ty) / a.scale), (16.0, 16.0));
        // a 32x32 block centered at (16, 16) needs no zoom
        let f = teeth_affine(&square_mask(64, 0, 0, 32), 64, 64).unwrap();
        assert_eq!((f.affine.scale, f.affine.tx, f.affine.ty), (1.0, 16.0, 16.0));
    }

    #[test]
    fn empty_mask_flags_identity() {
        let f = teeth_affine(&alloc::vec![false; 64], 8, 8).unwrap();
        assert!(f.empty_teeth);
        assert_eq!(f.affine, AffineFocus::IDENTITY);
    }

    #[test]
    fn inverse_composes_to_identity() {
        let a = AffineFocus::new(2.7, -13.25, 40.5).unwrap();
        let inv = a.inverse();
        for p in [[0.0, 0.0], [12.5, -3.0], [63.9, 17.2]] {
            let q = inv.apply(a.apply(p));
            assert!((q[0] - p[0]).abs() < 1e-9 && (q[1] - p[1]).abs() < 1e-9);
        }
        assert!(AffineFocus::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let x: Vec<f64> = (0..2 * 64).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(warp(&x, &AffineFocus::IDENTITY, 8, 8), x);
        assert_eq!(inverse_warp(&x, &AffineFocus::IDENTITY, 8, 8), x);
    }

    #[test]
    fn constant_stays_constant_inside() {
        let a = AffineFocus::new(2.0, -16.0, -16.0).unwrap();
        let out = warp(&alloc::vec![0.6f64; 32 * 32], &a, 32, 32);
        // every output maps inside the source for this zoom
        assert!(out.iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn warp_is_linear() {
        let a = AffineFocus::new(1.7, -9.0, -4.0).unwrap();
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.11).cos()).collect();
        let y: Vec<f64> = (0..256).map(|i| (i as f64 * 0.07).sin()).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| 2.0 * p - 0.5 * q).collect();
        let (wx, wy, wm) = (warp(&x, &a, 16, 16), warp(&y, &a, 16, 16), warp(&mix, &a, 16, 16));
        for i in 0..256 {
            assert!((wm[i] - (2.0 * wx[i] - 0.5 * wy[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn pipeline_shapes_and_empty_focus() {
        let mut s = ParamStore::<f64>::new();
        let net = TeethNet::new(&mut s, 16, 8, 8, 4, 1, &mut seeded(2));
        let w = TeethWarp::from_mask(&alloc::vec![false; 64], 8, 8).unwrap();
        assert!(w.focus.empty_teeth);
        let mut tape = Tape::new();
        let p = Bound::new(&mut tape, &s, false);
        let x = tape.constant(Tensor::full(&[1, 16, 8, 8], 0.25));
        let c = tape.constant(Tensor::zeros(&[1, 7]));
        let y = net.forward(&mut tape, &p, x, c, &[w]).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 8, 8]);
        // identity focus: second half is the completion of the unwarped input
        let direct = net.complete_teeth(&mut tape, &p, x, c).unwrap();
        let half = tape.slice(y, 1, 16, 16).unwrap();
        assert_eq!(tape.value(half).data(), tape.value(direct).data());
    }
}

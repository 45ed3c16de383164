//! Continuous intensity expression coding (CIEC).
//!
//! A CIEC is a 7-vector over the non-neutral expression types with at most
//! one non-zero entry in `[0, 1]`; the zero vector is the neutral face.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::CiecViolation;
use crate::{Error, Result};

/// Number of non-neutral expression types.
pub const NUM_TYPES: usize = 7;

/// Intensity assigned to dataset levels 1, 2 and 3.
pub const LEVEL_INTENSITY: [f64; 3] = [0.33, 0.67, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpressionType {
    Neutral,
    Angry,
    Contempt,
    Disgusted,
    Fear,
    Happy,
    Sad,
    Surprised,
}

impl ExpressionType {
    /// The seven non-neutral types in CIEC index order.
    pub const EXPRESSIVE: [ExpressionType; NUM_TYPES] = [
        ExpressionType::Angry,
        ExpressionType::Contempt,
        ExpressionType::Disgusted,
        ExpressionType::Fear,
        ExpressionType::Happy,
        ExpressionType::Sad,
        ExpressionType::Surprised,
    ];

    pub const ALL: [ExpressionType; NUM_TYPES + 1] = [
        ExpressionType::Neutral,
        ExpressionType::Angry,
        ExpressionType::Contempt,
        ExpressionType::Disgusted,
        ExpressionType::Fear,
        ExpressionType::Happy,
        ExpressionType::Sad,
        ExpressionType::Surprised,
    ];

    /// Position in the CIEC vector; `None` for neutral.
    pub fn index(self) -> Option<usize> {
        Self::EXPRESSIVE.iter().position(|t| *t == self)
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::EXPRESSIVE.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionType::Neutral => "neutral",
            ExpressionType::Angry => "angry",
            ExpressionType::Contempt => "contempt",
            ExpressionType::Disgusted => "disgusted",
            ExpressionType::Fear => "fear",
            ExpressionType::Happy => "happy",
            ExpressionType::Sad => "sad",
            ExpressionType::Surprised => "surprised",
        }
    }
}

impl fmt::Display for ExpressionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpressionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownExpression(s.to_string()))
    }
}

/// A validated CIEC.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ciec([f64; NUM_TYPES]);

impl Ciec {
    pub const NEUTRAL: Ciec = Ciec([0.0; NUM_TYPES]);

    /// Maps a dataset label to its code: level 1, 2, 3 become 0.33, 0.67, 1.
    pub fn from_label(ty: ExpressionType, level: u8) -> Result<Self> {
        match (ty.index(), level) {
            (None, 0) => Ok(Self::NEUTRAL),
            (None, l) => Err(Error::Level(l)),
            (Some(_), 0) => Err(Error::Level(0)),
            (Some(i), l @ 1..=3) => {
                let mut v = [0.0; NUM_TYPES];
                v[i] = LEVEL_INTENSITY[l as usize - 1];
                Ok(Self(v))
            }
            (Some(_), l) => Err(Error::Level(l)),
        }
    }

    /// A single type at an arbitrary intensity.
    pub fn new(ty: ExpressionType, intensity: f64) -> Result<Self> {
        match ty.index() {
            None if intensity == 0.0 => Ok(Self::NEUTRAL),
            None => Err(Error::Ciec(CiecViolation::OutOfRange)),
            Some(i) => {
                let mut v = [0.0; NUM_TYPES];
                v[i] = intensity;
                Self::validate(&v)
            }
        }
    }

    /// Checks the CIEC invariants on a raw vector.
    pub fn validate(raw: &[f64]) -> Result<Self> {
        if raw.len() != NUM_TYPES {
            return Err(Error::Ciec(CiecViolation::Length(raw.len())));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ciec(CiecViolation::NotFinite));
        }
        if raw.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Ciec(CiecViolation::OutOfRange));
        }
        if raw.iter().filter(|v| **v != 0.0).count() > 1 {
            return Err(Error::Ciec(CiecViolation::MultipleNonZero));
        }
        let mut v = [0.0; NUM_TYPES];
        v.copy_from_slice(raw);
        Ok(Self(v))
    }

    pub fn values(&self) -> &[f64; NUM_TYPES] {
        &self.0
    }

    pub fn is_neutral(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Active type and intensity; neutral reports `(Neutral, 0.0)`.
    pub fn active(&self) -> (ExpressionType, f64) {
        self.0
            .iter()
            .position(|v| *v != 0.0)
            .map(|i| (ExpressionType::EXPRESSIVE[i], self.0[i]))
            .unwrap_or((ExpressionType::Neutral, 0.0))
    }

    pub fn intensity(&self) -> f64 {
        self.active().1
    }

    /// Inverse of [`Ciec::from_label`] for codes produced by it.
    pub fn to_label(&self) -> (ExpressionType, u8) {
        let (ty, v) = self.active();
        if ty == ExpressionType::Neutral {
            return (ty, 0);
        }
        let level = LEVEL_INTENSITY
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - v).abs().total_cmp(&(b.1 - v).abs()))
            .map(|(i, _)| i as u8 + 1)
            .unwrap_or(1);
        (ty, level)
    }
}

/// Wire form of a timeline keyframe: `{"frame", "type", "intensity"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeRecord {
    pub frame: u64,
    #[serde(rename = "type")]
    pub ty: String,
    pub intensity: f64,
}

/// Keyframed CIEC curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CiecTimeline {
    keys: Vec<(u64, Ciec)>,
}

impl CiecTimeline {
    /// Validates ordering and the zero-crossing rule between type changes.
    pub fn new(keys: Vec<(u64, Ciec)>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::Timeline("no keyframes".into()));
        }
        for w in keys.windows(2) {
            let ((fa, a), (fb, b)) = (w[0], w[1]);
            if fb <= fa {
                return Err(Error::Timeline(format!("frame {fb} does not follow {fa}")));
            }
            let (ta, tb) = (a.active().0, b.active().0);
            if ta != ExpressionType::Neutral && tb != ExpressionType::Neutral && ta != tb {
                return Err(Error::Timeline(format!(
                    "switch from {ta} to {tb} between frames {fa} and {fb} needs a zero-intensity keyframe"
                )));
            }
        }
        Ok(Self { keys })
    }

    pub fn from_records(records: &[KeyframeRecord]) -> Result<Self> {
        let keys = records
            .iter()
            .map(|r| {
                let ty: ExpressionType = r.ty.parse()?;
                Ok((r.frame, Ciec::new(ty, r.intensity)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(keys)
    }

    pub fn to_records(&self) -> Vec<KeyframeRecord> {
        self.keys
            .iter()
            .map(|(f, c)| {
                let (ty, v) = c.active();
                KeyframeRecord { frame: *f, ty: ty.name().to_string(), intensity: v }
            })
            .collect()
    }

    pub fn keys(&self) -> &[(u64, Ciec)] {
        &self.keys
    }

    pub fn last_frame(&self) -> u64 {
        self.keys.last().map_or(0, |k| k.0)
    }

    /// Piecewise-linear sample; clamps outside the keyed range.
    pub fn sample(&self, frame: u64) -> Ciec {
        let first = self.keys[0];
        if frame <= first.0 {
            return first.1;
        }
        let last = self.keys[self.keys.len() - 1];
        if frame >= last.0 {
            return last.1;
        }
        let i = self.keys.partition_point(|k| k.0 <= frame) - 1;
        let ((fa, a), (fb, b)) = (self.keys[i], self.keys[i + 1]);
        let t = (frame - fa) as f64 / (fb - fa) as f64;
        let (ta, va) = a.active();
        let (tb, vb) = b.active();
        let ty = if ta != ExpressionType::Neutral { ta } else { tb };
        let Some(idx) = ty.index() else {
            return Ciec::NEUTRAL;
        };
        let v = (va + (vb - va) * t).clamp(0.0, 1.0);
        let mut out = [0.0; NUM_TYPES];
        out[idx] = v;
        Ciec(out)
    }
}

/// Rate-limited follower of a target CIEC. A change of type first ramps the
/// current intensity down to zero, then ramps up in the new type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiecSlew {
    current: Ciec,
    target: Ciec,
    /// Maximum intensity change per second.
    pub rate: f64,
}

impl CiecSlew {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Config(format!("slew rate {rate} must be positive and finite")));
        }
        Ok(Self { current: Ciec::NEUTRAL, target: Ciec::NEUTRAL, rate })
    }

    pub fn set_target(&mut self, target: Ciec) {
        self.target = target;
    }

    pub fn target(&self) -> Ciec {
        self.target
    }

    pub fn current(&self) -> Ciec {
        self.current
    }

    /// Advances by `dt` seconds and returns the new current code.
    pub fn advance(&mut self, dt: f64) -> Ciec {
        let budget = self.rate * dt.max(0.0);
        let (ct, mut cv) = self.current.active();
        let (tt, tv) = self.target.active();
        let mut ty = ct;
        if ct != tt && ct != ExpressionType::Neutral && cv > 0.0 {
            // Lands on neutral for at least one step before switching type.
            cv -= cv.min(budget);
            if cv <= 1e-12 {
                self.current = Ciec::NEUTRAL;
            } else {
                self.current = Ciec::new(ct, cv).expect("within range");
            }
            return self.current;
        }
        if cv == 0.0 {
            ty = tt;
        }
        let goal = if ty == tt { tv } else { 0.0 };
        let mut v = if goal > cv { (cv + budget).min(goal) } else { (cv - budget).max(goal) };
        if (v - goal).abs() <= 1e-12 {
            v = goal;
        }
        self.current = if ty == ExpressionType::Neutral || v == 0.0 {
            Ciec::NEUTRAL
        } else {
            Ciec::new(ty, v.clamp(0.0, 1.0)).expect("within range")
        };
        self.current
    }
}

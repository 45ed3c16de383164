//! Live-session protocol (version 1) and per-session state.
//!
//! Control messages are JSON text with `"v": 1` and a `"kind"`. The server
//! answers each with an `ack` or an `error`, and streams every frame as a
//! `frame` metadata message followed by a binary PNG.

use dntx_core::ciec::{Ciec, CiecSlew, CiecTimeline, ExpressionType, KeyframeRecord};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Control {
    SetCiec {
        v: u32,
        #[serde(rename = "type")]
        ty: String,
        intensity: f64,
    },
    SetTimeline {
        v: u32,
        keyframes: Vec<KeyframeRecord>,
    },
    Pause {
        v: u32,
    },
    Resume {
        v: u32,
    },
    Seek {
        v: u32,
        frame: u64,
    },
}

impl Control {
    pub fn version(&self) -> u32 {
        match self {
            Control::SetCiec { v, .. }
            | Control::SetTimeline { v, .. }
            | Control::Pause { v }
            | Control::Resume { v }
            | Control::Seek { v, .. } => *v,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Control::SetCiec { .. } => "set_ciec",
            Control::SetTimeline { .. } => "set_timeline",
            Control::Pause { .. } => "pause",
            Control::Resume { .. } => "resume",
            Control::Seek { .. } => "seek",
        }
    }
}

/// `{"type", "intensity"}` form of a code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiecWire {
    #[serde(rename = "type")]
    pub ty: ExpressionType,
    pub intensity: f64,
}

impl From<Ciec> for CiecWire {
    fn from(c: Ciec) -> Self {
        let (ty, intensity) = c.active();
        Self { ty, intensity }
    }
}

impl CiecWire {
    pub fn to_ciec(self) -> dntx_core::Result<Ciec> {
        Ciec::new(self.ty, self.intensity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        v: u32,
        session: u64,
        model_id: String,
        fps: f64,
        slew: f64,
        frames: usize,
    },
    Ack {
        v: u32,
        request: String,
        applied: bool,
    },
    Error {
        v: u32,
        code: String,
        message: String,
    },
    Frame(FrameMeta),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub v: u32,
    /// Strictly increasing per session.
    pub frame: u64,
    /// Position in the driving clip.
    pub cursor: usize,
    pub ciec: CiecWire,
    pub target: CiecWire,
    pub weights: Vec<f32>,
    pub render_ms: f64,
    /// The frame was produced later than its slot at the target rate.
    pub lagging: bool,
}

pub fn error(code: &str, message: impl Into<String>) -> ServerMsg {
    ServerMsg::Error { v: PROTOCOL_VERSION, code: code.into(), message: message.into() }
}

/// What the render loop should produce next.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePlan {
    pub frame: u64,
    pub cursor: usize,
    pub ciec: Ciec,
    pub target: Ciec,
}

/// One session's control state. Time is in seconds on the caller's clock.
#[derive(Debug, Clone)]
pub struct SessionState {
    slew: CiecSlew,
    timeline: Option<CiecTimeline>,
    paused: bool,
    cursor: usize,
    clip_len: usize,
    next_frame: u64,
    clock: f64,
}

impl SessionState {
    pub fn new(slew_rate: f64, clip_len: usize, now: f64) -> dntx_core::Result<Self> {
        if clip_len == 0 {
            return Err(dntx_core::Error::Config("session clip has no frames".into()));
        }
        Ok(Self { slew: CiecSlew::new(slew_rate)?, timeline: None, paused: false, cursor: 0, clip_len, next_frame: 0, clock: now })
    }

    pub fn actual(&self) -> Ciec {
        self.slew.current()
    }

    pub fn target(&self) -> Ciec {
        self.slew.target()
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    fn advance_to(&mut self, now: f64) {
        if now > self.clock {
            self.slew.advance(now - self.clock);
            self.clock = now;
        }
    }

    /// Applies one text message. Invalid requests leave the state untouched.
    pub fn handle_text(&mut self, text: &str, now: f64) -> ServerMsg {
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return error("malformed", format!("not JSON: {e}")),
        };
        match value.get("v").and_then(|v| v.as_u64()) {
            Some(v) if v == PROTOCOL_VERSION as u64 => {}
            Some(v) => return error("unsupported_version", format!("protocol version {v}, server speaks {PROTOCOL_VERSION}")),
            None => return error("malformed", "missing protocol version `v`"),
        }
        let msg: Control = match serde_json::from_value(value) {
            Ok(m) => m,
            Err(e) => return error("malformed", e.to_string()),
        };
        self.handle(msg, now)
    }

    pub fn handle(&mut self, msg: Control, now: f64) -> ServerMsg {
        let name = msg.name();
        if msg.version() != PROTOCOL_VERSION {
            return error("unsupported_version", format!("protocol version {}", msg.version()));
        }
        match msg {
            Control::SetCiec { ty, intensity, .. } => {
                let ty: ExpressionType = match ty.parse() {
                    Ok(t) => t,
                    Err(_) => return error("ciec_type", format!("unknown expression type {ty:?}")),
                };
                if !(0.0..=1.0).contains(&intensity) {
                    return error("ciec_range", format!("intensity {intensity} outside [0, 1]"));
                }
                let code = if ty == ExpressionType::Neutral {
                    Ciec::NEUTRAL
                } else {
                    match Ciec::new(ty, intensity) {
                        Ok(c) => c,
                        Err(e) => return error("ciec_range", e.to_string()),
                    }
                };
                // the old target governs the time already elapsed
                self.advance_to(now);
                self.timeline = None;
                self.slew.set_target(code);
            }
            Control::SetTimeline { keyframes, .. } => {
                let tl = match CiecTimeline::from_records(&keyframes) {
                    Ok(t) => t,
                    Err(dntx_core::Error::Ciec(e)) => return error("ciec_range", e.to_string()),
                    Err(e) => return error("timeline", e.to_string()),
                };
                self.advance_to(now);
                self.timeline = Some(tl);
            }
            Control::Pause { .. } => self.paused = true,
            Control::Resume { .. } => self.paused = false,
            Control::Seek { frame, .. } => {
                if frame >= self.clip_len as u64 {
                    return error("seek_range", format!("frame {frame} is past the {} clip frames", self.clip_len));
                }
                self.cursor = frame as usize;
            }
        }
        ServerMsg::Ack { v: PROTOCOL_VERSION, request: name.into(), applied: true }
    }

    /// Advances the smoothed code to `now` and returns the frame to render.
    /// The playback cursor moves on afterwards unless paused; it loops over
    /// the clip.
    pub fn plan_frame(&mut self, now: f64) -> FramePlan {
        if let Some(tl) = &self.timeline {
            let code = tl.sample(self.cursor as u64);
            self.advance_to(now);
            self.slew.set_target(code);
        } else {
            self.advance_to(now);
        }
        let plan = FramePlan { frame: self.next_frame, cursor: self.cursor, ciec: self.slew.current(), target: self.slew.target() };
        self.next_frame += 1;
        if !self.paused {
            self.cursor = (self.cursor + 1) % self.clip_len;
        }
        plan
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ty: &str, v: f64) -> String {
        format!(r#"{{"v":1,"kind":"set_ciec","type":"{ty}","intensity":{v}}}"#)
    }

    #[test]
    fn set_ciec_acks_and_ramps() {
        let mut s = SessionState::new(2.0, 10, 0.0).unwrap();
        let r = s.handle_text(&set("sad", 0.5), 0.0);
        assert_eq!(r, ServerMsg::Ack { v: 1, request: "set_ciec".into(), applied: true });
        assert_eq!(s.plan_frame(0.1).ciec.intensity(), 0.2);
        assert!((s.plan_frame(0.25).ciec.intensity() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_is_rejected_without_change() {
        let mut s = SessionState::new(2.0, 10, 0.0).unwrap();
        s.handle_text(&set("happy", 0.4), 0.0);
        let before = (s.target(), s.actual());
        match s.handle_text(&set("happy", 1.5), 0.0) {
            ServerMsg::Error { code, .. } => assert_eq!(code, "ciec_range"),
            other => panic!("{other:?}"),
        }
        assert_eq!((s.target(), s.actual()), before);
        for bad in ["{", "[]", r#"{"v":1,"kind":"dance"}"#, r#"{"kind":"pause"}"#] {
            assert!(matches!(s.handle_text(bad, 0.0), ServerMsg::Error { .. }), "{bad}");
        }
        match s.handle_text(r#"{"v":2,"kind":"pause"}"#, 0.0) {
            ServerMsg::Error { code, .. } => assert_eq!(code, "unsupported_version"),
            other => panic!("{other:?}"),
        }
        match s.handle_text(&set("bored", 0.1), 0.0) {
            ServerMsg::Error { code, .. } => assert_eq!(code, "ciec_type"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rapid_type_changes_pass_through_neutral() {
        let mut s = SessionState::new(2.0, 100, 0.0).unwrap();
        s.handle_text(&set("happy", 1.0), 0.0);
        let mut t = 0.0;
        for _ in 0..6 {
            t += 0.05;
            s.plan_frame(t);
        }
        s.handle_text(&set("angry", 0.8), t);
        s.handle_text(&set("fear", 0.6), t + 0.01);
        let mut trace = Vec::new();
        for _ in 0..30 {
            t += 0.05;
            trace.push(s.plan_frame(t).ciec.active());
        }
        let first = trace.iter().position(|(ty, _)| *ty == ExpressionType::Fear).unwrap();
        assert_eq!(trace[first - 1].0, ExpressionType::Neutral);
        assert!(trace[..first].iter().all(|(ty, _)| matches!(ty, ExpressionType::Happy | ExpressionType::Neutral)));
        assert_eq!(trace.last().unwrap(), &(ExpressionType::Fear, 0.6));
    }

    #[test]
    fn cursor_pause_seek_and_ordering() {
        let mut s = SessionState::new(2.0, 3, 0.0).unwrap();
        let frames: Vec<_> = (0..4).map(|i| s.plan_frame(i as f64 * 0.05)).collect();
        assert_eq!(frames.iter().map(|f| f.cursor).collect::<Vec<_>>(), [0, 1, 2, 0]);
        assert_eq!(frames.iter().map(|f| f.frame).collect::<Vec<_>>(), [0, 1, 2, 3]);
        s.handle_text(r#"{"v":1,"kind":"pause"}"#, 0.2);
        assert_eq!(s.plan_frame(0.25).cursor, 1);
        assert_eq!(s.plan_frame(0.3).cursor, 1);
        s.handle_text(r#"{"v":1,"kind":"seek","frame":2}"#, 0.3);
        assert_eq!(s.plan_frame(0.35).cursor, 2);
        assert!(matches!(s.handle_text(r#"{"v":1,"kind":"seek","frame":3}"#, 0.4), ServerMsg::Error { .. }));
        s.handle_text(r#"{"v":1,"kind":"resume"}"#, 0.4);
        assert_eq!(s.plan_frame(0.45).cursor, 2);
        assert_eq!(s.plan_frame(0.5).cursor, 0);
    }

    #[test]
    fn timeline_drives_the_target() {
        let mut s = SessionState::new(100.0, 50, 0.0).unwrap();
        let msg = r#"{"v":1,"kind":"set_timeline","keyframes":[{"frame":0,"type":"neutral","intensity":0},{"frame":10,"type":"sad","intensity":1}]}"#;
        assert!(matches!(s.handle_text(msg, 0.0), ServerMsg::Ack { .. }));
        let mut last = 0.0;
        for i in 0..12 {
            let p = s.plan_frame(1.0 + i as f64);
            assert!(p.ciec.intensity() >= last);
            last = p.ciec.intensity();
        }
        assert_eq!(last, 1.0);
        let bad = r#"{"v":1,"kind":"set_timeline","keyframes":[{"frame":0,"type":"sad","intensity":1},{"frame":3,"type":"happy","intensity":1}]}"#;
        match s.handle_text(bad, 20.0) {
            ServerMsg::Error { code, .. } => assert_eq!(code, "timeline"),
            other => panic!("{other:?}"),
        }
    }
}

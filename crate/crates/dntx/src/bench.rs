//! Per-stage latency of frame synthesis.

use dntx_core::ciec::{Ciec, ExpressionType};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{AudioCursor, Drive, Engine, FrameOut, STAGES};
use crate::error::Result;

/// Published per-frame time of the original system, kept for display.
pub const REFERENCE_MS: f64 = 31.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub mode: String,
    pub threads: usize,
    pub frames: usize,
    pub stages: Vec<StageStats>,
    pub total: StageStats,
    /// Frames per second of wall time across all threads.
    pub throughput_fps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_id: String,
    pub height: usize,
    pub width: usize,
    pub reference_ms: f64,
    pub reference_note: String,
    /// Hash of every image rendered in single-threaded mode.
    pub output_sha256: String,
    pub runs: Vec<BenchRun>,
}

/// Linear-interpolated quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn stats(stage: &str, values: &[f64]) -> StageStats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    StageStats {
        stage: stage.into(),
        median_ms: quantile(&v, 0.5),
        p95_ms: quantile(&v, 0.95),
        mean_ms: v.iter().sum::<f64>() / v.len().max(1) as f64,
    }
}

/// The code at bench frame `i`: a happy ramp 0 to 1 over 60 frames, repeated.
pub fn bench_ciec(i: usize) -> Ciec {
    Ciec::new(ExpressionType::Happy, (i % 60) as f64 / 59.0).expect("in range")
}

fn render_range(engine: &Engine, drive: &Drive, frames: impl Iterator<Item = usize>, mut sink: impl FnMut(FrameOut)) -> Result<()> {
    let mut cursor = AudioCursor::default();
    for i in frames {
        sink(engine.render(drive, &mut cursor, i % drive.len(), bench_ciec(i))?);
    }
    Ok(())
}

fn summarize(mode: &str, threads: usize, outs: &[[f64; 6]], wall_s: f64) -> BenchRun {
    let stages = STAGES.iter().enumerate().map(|(k, s)| stats(s, &outs.iter().map(|o| o[k]).collect::<Vec<_>>())).collect();
    let totals: Vec<f64> = outs.iter().map(|o| o.iter().sum()).collect();
    BenchRun {
        mode: mode.into(),
        threads,
        frames: outs.len(),
        stages,
        total: stats("total", &totals),
        throughput_fps: outs.len() as f64 / wall_s.max(1e-9),
    }
}

/// Times `frames` frames single-threaded, then again split over `threads`
/// workers when `threads > 1`.
pub fn run(engine: &Engine, drive: &Drive, frames: usize, threads: usize) -> Result<BenchReport> {
    engine.check_drive(drive)?;
    let mut hasher = Sha256::new();
    let mut single = Vec::with_capacity(frames);
    let clock = std::time::Instant::now();
    render_range(engine, drive, 0..frames, |o| {
        for v in o.image.data() {
            hasher.update(v.to_le_bytes());
        }
        single.push(o.stage_ms);
    })?;
    let mut runs = vec![summarize("single", 1, &single, clock.elapsed().as_secs_f64())];

    if threads > 1 {
        let clock = std::time::Instant::now();
        let chunk = frames.div_ceil(threads);
        let parts: Vec<Result<Vec<[f64; 6]>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    s.spawn(move || {
                        let mut local = Vec::new();
                        render_range(engine, drive, (w * chunk)..((w + 1) * chunk).min(frames), |o| local.push(o.stage_ms))?;
                        Ok(local)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(frames);
        for p in parts {
            all.extend(p?);
        }
        runs.push(summarize("parallel", threads, &all, clock.elapsed().as_secs_f64()));
    }

    let cfg = &engine.loaded.model.cfg;
    Ok(BenchReport {
        model_id: engine.loaded.model_id.clone(),
        height: cfg.height,
        width: cfg.width,
        reference_ms: REFERENCE_MS,
        reference_note: "published per-frame time on different hardware; for comparison only".into(),
        output_sha256: hasher.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        runs,
    })
}

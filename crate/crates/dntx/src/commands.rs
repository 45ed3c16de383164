//! Subcommand implementations. Each writes its artifacts and the resolved
//! configuration under the run's output directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dntx_core::audio_exp::train_audio_exp;
use dntx_core::audit::gradient_audit;
use dntx_core::ciec::{Ciec, CiecTimeline, ExpressionType, KeyframeRecord};
use dntx_core::decouple::{train_decouple, DecouplePools};
use dntx_core::metrics::{evaluate_model, evidence_experiment, FrameClassifiers};
use dntx_core::nn::{GradCheckOptions, ParamStore};
use dntx_core::pipeline::Model;
use dntx_core::synth::{generate_clip, generate_dataset, ClipRecord, ClipSpec, DatasetConfig};
use dntx_core::train::{frame_samples, train_end_to_end};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, save_model, Checkpoint, ModelSnapshot};
use crate::config::{RunConfig, SeedSource};
use crate::dataset::{frame_name, read_dataset, write_dataset, write_png, Dataset};
use crate::engine::{AudioCursor, Drive, Engine};
use crate::error::{Error, Result};

/// Output directory plus an append-only `run.log` mirrored to the logger.
pub struct Run {
    pub config: RunConfig,
    log: BufWriter<File>,
}

impl Run {
    pub fn start(config: RunConfig, seed_source: SeedSource, command: &str) -> Result<Self> {
        let path = config.write_resolved(seed_source)?;
        let log_path = config.output_dir.join("run.log");
        let file = File::options().create(true).append(true).open(&log_path).map_err(Error::io(&log_path))?;
        let mut run = Self { config, log: BufWriter::new(file) };
        run.note(&format!("command {command}; resolved configuration in {}", path.display()));
        let full = serde_json::to_string(&run.config).expect("serializable");
        run.note(&format!("configuration {full}"));
        Ok(run)
    }

    pub fn note(&mut self, line: &str) {
        log::info!("{line}");
        let _ = writeln!(self.log, "{line}");
        let _ = self.log.flush();
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(v).expect("serializable")).map_err(Error::io(&p))?;
        Ok(p)
    }

    pub fn write_text(&self, name: &str, s: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, s).map_err(Error::io(&p))?;
        Ok(p)
    }
}

struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Csv {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = File::create(&path).map_err(Error::io(&path))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{header}").map_err(Error::io(&path))?;
        Ok(Self { path, out })
    }

    fn row(&mut self, line: &str) {
        let _ = writeln!(self.out, "{line}");
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(Error::io(&self.path))
    }
}

pub fn dataset(run: &mut Run) -> Result<()> {
    let cfg = run.config.dataset.clone();
    let clips = generate_dataset(&cfg)?;
    let root = run.path("dataset");
    let m = write_dataset(&root, &cfg, &clips)?;
    run.note(&format!("wrote {} clips of {} frames to {}", m.clips.len(), cfg.frames, root.display()));
    Ok(())
}

/// Training stages in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    All,
    Decouple,
    Audio,
    EndToEnd,
}

fn checked_geometry(run: &RunConfig, data: &DatasetConfig) -> Result<()> {
    if (run.model.height, run.model.width) != (data.height, data.width) {
        return Err(Error::Config(format!(
            "model renders {}x{} but the dataset has {}x{} frames",
            run.model.height, run.model.width, data.height, data.width
        )));
    }
    Ok(())
}

pub fn train(run: &mut Run, data: &Path, stage: Stage, init: Option<&Path>) -> Result<()> {
    let ds = read_dataset(data)?;
    let dcfg = ds.manifest.config.clone();
    let cfg = run.config.clone();
    checked_geometry(&cfg, &dcfg)?;
    let basis = dcfg.basis()?;
    let camera = dcfg.camera()?;

    let (model, mut store, mut snapshot) = match init {
        Some(p) => {
            let l = load_model(p)?;
            if l.snapshot.model != cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model configuration", p.display())));
            }
            (l.model, l.store, l.snapshot)
        }
        None => {
            let mut store = ParamStore::new();
            let model = Model::new(&cfg.model, &mut store)?;
            (model, store, ModelSnapshot { model: cfg.model.clone(), dataset: dcfg.clone(), stages: Vec::new(), run: serde_json::Value::Null })
        }
    };
    snapshot.run = serde_json::to_value(&cfg).expect("serializable");
    snapshot.dataset = dcfg.clone();
    let ckpt = run.path("model.dntc");
    let wants = |s: Stage| stage == Stage::All || stage == s;

    if wants(Stage::Decouple) {
        let w = cfg.train.decouple.weights;
        run.note(&format!("decoupling loss weights lambda1={} lambda2={}", w.lambda1, w.lambda2));
        let pools = DecouplePools::from_clips(&ds.clips, cfg.train.decouple.jitter, cfg.train.decouple.seed)?;
        let mut csv = Csv::create(run.path("decouple_log.csv"), "step,adv,neutral,landmarks,total")?;
        let report = train_decouple(&model.decouple, &mut store, &pools, &basis, &cfg.train.decouple, |r| {
            csv.row(&format!("{},{},{},{},{}", r.step, r.adv, r.neutral, r.landmarks, r.total))
        })
        .map_err(numerical)?;
        csv.finish()?;
        run.note(&format!(
            "decoupling: neutral L1 {:.4}, mouth drift {:.4} of mouth width, discriminator accuracy {:.3}",
            report.neutral_l1, report.mouth_ratio, report.disc_accuracy
        ));
        let mut summary = report.clone();
        summary.history.clear();
        run.write_json("decouple_report.json", &summary)?;
        snapshot.stages.push("decouple".into());
        save_model(&ckpt, &snapshot, &store)?;
    }

    if wants(Stage::Audio) {
        let w = cfg.train.audio.weights;
        run.note(&format!("audio loss weights lambda_s1={} lambda_s2={}", w.lambda_s1, w.lambda_s2));
        let mut csv = Csv::create(run.path("audio_log.csv"), "step,total,geometry,dlt,lpl")?;
        let report = train_audio_exp(&model.audio, &mut store, &ds.clips, &basis, &cfg.train.audio, |r| {
            csv.row(&format!("{},{},{},{},{}", r.step, r.total, r.geometry, r.dlt, r.lpl))
        })
        .map_err(numerical)?;
        csv.finish()?;
        run.note(&format!(
            "audio: held-out geometry RMSE {:.5}, jaw correlation {:.3}",
            report.geometry_rmse, report.jaw_correlation
        ));
        let mut summary = report.clone();
        summary.history.clear();
        run.write_json("audio_report.json", &summary)?;
        snapshot.stages.push("audio".into());
        save_model(&ckpt, &snapshot, &store)?;
    }

    if wants(Stage::EndToEnd) {
        let clips = select_clips(&ds, cfg.train.clips.as_deref())?;
        let samples = frame_samples(&model, &store, &clips, &basis, &camera, cfg.train.split)?;
        let tcfg = cfg.train.end_to_end();
        run.note(&format!(
            "end-to-end training on {} frames of {} clips, lr {}, batch {}, up to {} steps",
            samples.len(),
            clips.len(),
            tcfg.learning_rate,
            tcfg.batch_size,
            tcfg.max_steps
        ));
        let mut csv = Csv::create(run.path("loss.csv"), "step,loss,psnr")?;
        let result = train_end_to_end(&model, &mut store, &samples, &tcfg, |r| csv.row(&format!("{},{},{}", r.step, r.loss, r.psnr)));
        csv.finish()?;
        match result {
            Ok(report) => {
                run.note(&format!(
                    "end-to-end: {} steps, training PSNR {:.2} dB, SSIM {:.4}",
                    report.steps, report.train_psnr, report.train_ssim
                ));
                let mut summary = report.clone();
                summary.history.clear();
                run.write_json("train_report.json", &summary)?;
                snapshot.stages.push("end_to_end".into());
                save_model(&ckpt, &snapshot, &store)?;
            }
            Err(e) => {
                // the store was rolled back to its last good state
                save_model(&ckpt, &snapshot, &store)?;
                run.note(&format!("end-to-end training failed: {e}; last good weights kept in {}", ckpt.display()));
                return Err(numerical(e));
            }
        }
    }
    run.note(&format!("checkpoint {}", ckpt.display()));
    Ok(())
}

fn numerical(e: dntx_core::Error) -> Error {
    match e {
        dntx_core::Error::Diverged { .. } | dntx_core::Error::NonFinite(_) => Error::Numerical(e.to_string()),
        other => Error::Core(other),
    }
}

fn select_clips(ds: &Dataset, ids: Option<&[String]>) -> Result<Vec<ClipRecord>> {
    match ids {
        None => Ok(ds.clips.clone()),
        Some(ids) => ids
            .iter()
            .map(|id| ds.clips.iter().find(|c| &c.id == id).cloned().ok_or_else(|| Error::Config(format!("no clip {id} in the dataset"))))
            .collect(),
    }
}

pub fn evaluate(run: &mut Run, checkpoint: &Path, data: &Path) -> Result<()> {
    let loaded = load_model(checkpoint)?;
    let ds = read_dataset(data)?;
    let dcfg = &ds.manifest.config;
    if (dcfg.seed, dcfg.vertices) != (loaded.snapshot.dataset.seed, loaded.snapshot.dataset.vertices) {
        return Err(Error::Config("the dataset's face model differs from the checkpoint's".into()));
    }
    let basis = dcfg.basis()?;
    let camera = dcfg.camera()?;
    let ev = run.config.eval.clone();
    let classifiers = if ev.classifiers {
        run.note("training frame classifiers on the early split");
        Some(FrameClassifiers::train(&ds.clips, dntx_core::train::Split::Train, &ev.classifier)?)
    } else {
        None
    };
    let report = evaluate_model(&loaded.model, &loaded.store, &ds.clips, &basis, &camera, ev.source, ev.split, classifiers.as_ref())?;
    run.write_json("report.json", &report)?;
    run.write_text("report.md", &report.markdown())?;
    run.note(&format!("evaluated {} frames: PSNR {:.2} dB, SSIM {:.4}", report.frames, report.psnr, report.ssim));
    println!("{}", report.markdown());
    Ok(())
}

pub fn evidence(run: &mut Run, data: Option<&Path>) -> Result<()> {
    let clips = match data {
        Some(d) => read_dataset(d)?.clips.into_iter().filter(|c| c.expression != ExpressionType::Neutral).collect(),
        None => {
            let cfg = DatasetConfig { clips_per_label: 2, neutral_clips: 0, ..run.config.dataset.clone() };
            run.note(&format!("generating {} evidence clips", cfg.clip_specs().len()));
            generate_dataset(&cfg)?
        }
    };
    let dcfg = &run.config.dataset;
    let clock = std::time::Instant::now();
    let report = evidence_experiment(&clips, &dcfg.basis()?, &dcfg.camera()?, &run.config.eval.evidence, |s, fold| {
        log::info!("{} fold {fold}", s.label())
    })?;
    let (rt, rl) = report.ratios();
    run.note(&format!(
        "evidence: untextured/textured cross-entropy ratios {rt:.2} (type) and {rl:.2} (level); ordering at 2x {} in {:.0} s",
        if report.ordering_holds(2.0) { "holds" } else { "fails" },
        clock.elapsed().as_secs_f64()
    ));
    run.write_json("evidence.json", &report)?;
    run.write_text("evidence.md", &report.markdown())?;
    println!("{}", report.markdown());
    Ok(())
}

#[derive(Debug, Serialize)]
struct AuditRow {
    module: String,
    probes: usize,
    kinks: usize,
    max_rel_error: f64,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck(run: &mut Run, modules: &[String], inject_fault: bool, samples: usize) -> Result<()> {
    let names: Vec<&str> = modules.iter().map(String::as_str).collect();
    let opts = GradCheckOptions { samples, fault_injection: inject_fault, ..GradCheckOptions::default() };
    let entries = gradient_audit(&names, opts).map_err(|e| match e {
        dntx_core::Error::Config(m) => Error::Config(m),
        other => Error::Core(other),
    })?;
    let rows: Vec<AuditRow> = entries
        .iter()
        .map(|e| AuditRow {
            module: e.module.clone(),
            probes: e.report.samples.len(),
            kinks: e.report.kinks,
            max_rel_error: e.report.max_rel_error,
            tolerance: e.report.tolerance,
            passed: e.report.passed,
        })
        .collect();
    let mut table = String::from("| module | probes | kinks | max rel error | result |\n|---|---|---|---|---|\n");
    for r in &rows {
        table += &format!("| {} | {} | {} | {:.2e} | {} |\n", r.module, r.probes, r.kinks, r.max_rel_error, if r.passed { "pass" } else { "FAIL" });
    }
    println!("{table}");
    run.write_json("gradcheck.json", &rows)?;
    run.write_text("gradcheck.md", &table)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.module.as_str()).collect();
    if failed.is_empty() {
        run.note(&format!("gradient audit passed for {} modules", rows.len()));
        Ok(())
    } else {
        run.note(&format!("gradient audit failed for {}", failed.join(", ")));
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Where the driving signals of `synthesize`, `bench` and `serve` come from.
#[derive(Debug, Clone, Default)]
pub struct DriveSource {
    pub data: Option<PathBuf>,
    pub clip: Option<String>,
    pub audio: Option<PathBuf>,
    pub background: Option<PathBuf>,
}

/// A dataset clip, a feature container plus background image, or (when
/// nothing is given) a clip generated from the checkpoint's dataset settings.
pub fn load_drive(engine: &Engine, src: &DriveSource) -> Result<(String, Drive)> {
    let background = src.background.as_deref().map(crate::dataset::read_png).transpose()?;
    if let Some(audio) = &src.audio {
        let feats = Checkpoint::load(audio)?;
        let a = feats.get("audio_features").cloned().ok_or_else(|| Error::Dataset(format!("{} has no audio_features", audio.display())))?;
        let bg = background.ok_or_else(|| Error::Config("--audio needs --background".into()))?;
        let drive = Drive::new(a, feats.get("pose_seq").cloned(), vec![bg])?;
        engine.check_drive(&drive)?;
        return Ok((audio.display().to_string(), drive));
    }
    let clip = match &src.data {
        Some(d) => {
            let m = crate::dataset::read_manifest(d)?;
            let entry = match &src.clip {
                Some(id) => m.clips.iter().find(|e| &e.id == id).ok_or_else(|| Error::Config(format!("no clip {id} in {}", d.display())))?,
                None => m.clips.first().ok_or_else(|| Error::Dataset("dataset has no clips".into()))?,
            };
            crate::dataset::read_clip(d, entry)?
        }
        None => {
            let cfg = &engine.loaded.snapshot.dataset;
            generate_clip(cfg, &engine.basis, ClipSpec { expression: ExpressionType::Neutral, level: 0, slot: 0 })?
        }
    };
    let mut drive = Drive::from_clip(&clip);
    if let Some(bg) = background {
        drive.backgrounds = vec![bg];
    }
    engine.check_drive(&drive)?;
    Ok((clip.id, drive))
}

pub fn read_timeline(path: &Path) -> Result<CiecTimeline> {
    let s = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let recs: Vec<KeyframeRecord> = serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    CiecTimeline::from_records(&recs).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub ciec: crate::session::CiecWire,
    pub weights: Vec<f32>,
    pub texture_sha256: String,
    pub render_ms: f64,
}

fn sha_hex(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn synthesize(run: &mut Run, checkpoint: &Path, timeline: &Path, src: &DriveSource, frames: Option<usize>) -> Result<()> {
    let engine = Engine::new(load_model(checkpoint)?)?;
    let tl = read_timeline(timeline)?;
    let (id, drive) = load_drive(&engine, src)?;
    let n = frames.unwrap_or(drive.len());
    if n == 0 || n > drive.len() {
        return Err(Error::Config(format!("{n} frames requested from {} driving frames", drive.len())));
    }
    let dir = run.path("frames");
    std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
    run.note(&format!("synthesizing {n} frames driven by {id}"));
    let mut cursor = AudioCursor::default();
    let mut records = Vec::with_capacity(n);
    for t in 0..n {
        let ciec: Ciec = tl.sample(t as u64);
        let out = engine.render(&drive, &mut cursor, t, ciec)?;
        write_png(&dir.join(frame_name(t)), &out.image).map_err(|e| Error::Frame { frame: t, source: Box::new(e) })?;
        records.push(FrameRecord {
            frame: t,
            ciec: ciec.into(),
            weights: out.weights.clone(),
            texture_sha256: sha_hex(out.texture.data()),
            render_ms: out.total_ms(),
        });
    }
    run.write_json("frames.json", &records)?;
    run.note(&format!("wrote {n} frames to {}", dir.display()));
    Ok(())
}

pub fn bench(run: &mut Run, checkpoint: &Path, src: &DriveSource, frames: Option<usize>, threads: usize) -> Result<()> {
    let engine = Engine::new(load_model(checkpoint)?)?;
    let (id, drive) = load_drive(&engine, src)?;
    let n = frames.unwrap_or(run.config.eval.bench_frames);
    run.note(&format!("timing {n} frames driven by {id}, {threads} worker thread(s) in parallel mode"));
    let report = crate::bench::run(&engine, &drive, n, threads)?;
    for r in &report.runs {
        let stages: Vec<String> = r.stages.iter().map(|s| format!("{} {:.2}/{:.2}", s.stage, s.median_ms, s.p95_ms)).collect();
        run.note(&format!(
            "{} ({} threads): total median {:.2} ms, p95 {:.2} ms; per stage median/p95 ms: {}",
            r.mode,
            r.threads,
            r.total.median_ms,
            r.total.p95_ms,
            stages.join(", ")
        ));
    }
    run.write_json("bench.json", &report)?;
    Ok(())
}

pub fn serve(run: &mut Run, checkpoint: &Path, src: &DriveSource, bind: Option<&str>) -> Result<()> {
    let engine = Engine::new(load_model(checkpoint)?)?;
    let mut src = src.clone();
    if src.clip.is_none() {
        src.clip = run.config.serve.clip.clone();
    }
    let (id, drive) = load_drive(&engine, &src)?;
    let s = &run.config.serve;
    let bind = bind.unwrap_or(&s.bind).to_string();
    let shared = crate::server::Shared::new(engine, drive, id.clone(), s.fps, s.slew)?;
    run.note(&format!("serving clip {id} on {bind} at {} fps, slew {}/s", s.fps, s.slew));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Error::io("tokio runtime"))?;
    rt.block_on(crate::server::serve(shared, &bind))
}

//! Staged batch run over a sequence: load, track, odometry, inpaint, map, log.

mod config;
mod timing;

pub use config::{apply_override, DetectionSource, Mode, PipelineConfig, RunManifest};
pub use timing::{Clock, StageTimes, StageTiming, SystemClock, TimingReport, STAGES};

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};
use std::thread;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{read_trajectory, write_trajectory, Detection, DetectionStore, Frame, Sequence, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{compute_ate, emit_plot, EvalReport};
use crate::geom::{Intrinsics, Pose};
use crate::inpaint::{inpaint, InpaintConfig};
use crate::map::{contamination, export_ply, ContaminationReport, VoxelMap};
use crate::mask::Mask;
use crate::synth::{read_dynamic_volumes, render_sequence, GroundTruth, NoiseSpec, SceneSpec, VOLUMES_FILE};
use crate::tracker::{format_report_line, FrameMasks, ObjectReport, Tracker};
use crate::vo::{format_health_line, Odometry, OdometryEstimate, OdometryStatus};
use timing::{ms, INPAINT, LOAD, LOG, MAP, ODOMETRY, TRACK};

pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const ODOMETRY_LOG: &str = "odometry.log";
pub const TRACKS_LOG: &str = "tracks.log";
pub const MASKS_LOG: &str = "masks.log";
pub const MAP_FILE: &str = "map.ply";
pub const TIMING_FILE: &str = "timing.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_FILE: &str = "eval.txt";
pub const ATE_CSV: &str = "ate.csv";
pub const PLOT_FILE: &str = "trajectory.svg";
pub const CONTAMINATION_FILE: &str = "contamination.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    /// One worker thread per stage group, joined by bounded queues.
    #[default]
    Pipelined,
    /// Every stage on the calling thread, one frame at a time.
    Sequential,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub frames: usize,
    pub trajectory: Trajectory,
    pub estimates: Vec<OdometryEstimate>,
    pub map_points: usize,
    pub eval: Option<EvalReport>,
    pub contamination: Option<ContaminationReport>,
    pub timing: TimingReport,
}

/// One frame's masks as recorded in the masks log.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRecord {
    pub timestamp: f64,
    pub odometry: Mask,
    pub mapping: Mask,
}

fn stage_err(stage: &'static str, timestamp: f64) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            timestamp,
            source: Box::new(e),
        },
    }
}

/// Independent seed for stage `stream` derived from the run seed.
pub fn stage_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.next_u64()
}

enum Detections {
    None,
    Dir(DetectionStore),
    Synthetic(Box<SceneSpec>),
}

impl Detections {
    fn open(src: Option<DetectionSource>) -> Result<Self> {
        Ok(match src {
            None => Detections::None,
            Some(DetectionSource::Dir(d)) => Detections::Dir(DetectionStore::open(d)?),
            Some(DetectionSource::Synthetic(p)) => Detections::Synthetic(Box::new(read_scene_spec(&p)?)),
        })
    }

    fn load(&self, t: f64, max_dt: f64) -> Result<Vec<Detection>> {
        match self {
            Detections::None => Ok(Vec::new()),
            Detections::Dir(store) => store.load(t, max_dt),
            Detections::Synthetic(spec) => {
                let k = (t * spec.fps).round();
                if k < 0.0 || k as usize >= spec.frame_count() || (spec.frame_time(k as usize) - t).abs() > max_dt {
                    return Ok(Vec::new());
                }
                Ok(spec.detections(&spec.render_frame(k as usize)))
            }
        }
    }
}

pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    SceneSpec::from_toml(&text)
}

struct Loaded {
    frame: Frame,
    detections: Vec<Detection>,
    times: StageTimes,
}

struct Tracked {
    frame: Frame,
    masks: FrameMasks,
    reports: Vec<ObjectReport>,
    estimate: OdometryEstimate,
    times: StageTimes,
}

struct Mapped {
    masks: FrameMasks,
    reports: Vec<ObjectReport>,
    estimate: OdometryEstimate,
    times: StageTimes,
}

struct Loader<'a> {
    seq: &'a Sequence,
    detections: &'a Detections,
    max_dt: f64,
}

impl Loader<'_> {
    fn load(&self, i: usize, clock: &dyn Clock) -> Result<Loaded> {
        let t = self.seq.entries[i].timestamp;
        let t0 = clock.now();
        let frame = self.seq.load_frame(i).map_err(stage_err("load", t))?;
        let detections = self.detections.load(t, self.max_dt).map_err(stage_err("load", t))?;
        let mut times = StageTimes::default();
        times[LOAD] = ms(clock.now() - t0);
        Ok(Loaded {
            frame,
            detections,
            times,
        })
    }
}

struct Core {
    tracker: Tracker,
    odometry: Odometry,
    mode: Mode,
}

impl Core {
    fn process(&mut self, l: Loaded, clock: &dyn Clock) -> Result<Tracked> {
        let Loaded {
            frame,
            detections,
            mut times,
        } = l;
        let t = frame.timestamp;
        let t0 = clock.now();
        let pose = self.odometry.predict(t);
        let out = self
            .tracker
            .step(&detections, &frame.depth, &frame.intrinsics, &pose, t)
            .map_err(stage_err("track", t))?;
        let masks = match self.mode {
            Mode::Baseline => FrameMasks::empty(frame.intrinsics.width, frame.intrinsics.height),
            _ => out.masks,
        };
        let t1 = clock.now();
        let estimate = self
            .odometry
            .track_frame(&frame, &masks)
            .map_err(stage_err("odometry", t))?;
        let t2 = clock.now();
        times[TRACK] = ms(t1 - t0);
        times[ODOMETRY] = ms(t2 - t1);
        Ok(Tracked {
            frame,
            masks,
            reports: out.report,
            estimate,
            times,
        })
    }
}

struct Mapper {
    map: VoxelMap,
    stride: u32,
    inpaint: InpaintConfig,
}

impl Mapper {
    fn process(&mut self, tr: Tracked, clock: &dyn Clock) -> Result<Mapped> {
        let Tracked {
            frame,
            masks,
            reports,
            estimate,
            mut times,
        } = tr;
        let t = frame.timestamp;
        let t0 = clock.now();
        let mask = &masks.mapping_mask;
        let filled = if self.inpaint.enabled && !mask.is_empty() {
            match inpaint(&frame.rgb, &frame.depth, mask, &self.inpaint) {
                Ok(r) => Some(r),
                Err(Error::AllMasked) => None,
                Err(e) => return Err(stage_err("inpaint", t)(e)),
            }
        } else {
            None
        };
        if let (Some(dir), Some(r)) = (&self.inpaint.dump_dir, &filled) {
            let save = |img: &image::RgbImage, tag: &str| {
                let p = dir.join(format!("{t:.6}_{tag}.png"));
                img.save(&p).map_err(|e| Error::Image {
                    path: p,
                    msg: e.to_string(),
                })
            };
            save(&frame.rgb, "before").map_err(stage_err("inpaint", t))?;
            save(&r.rgb, "after").map_err(stage_err("inpaint", t))?;
        }
        let t1 = clock.now();
        if estimate.status != OdometryStatus::Lost {
            let intr = &frame.intrinsics;
            let inserted = match (&filled, self.inpaint.insert_into_map) {
                (Some(r), true) => {
                    let none = Mask::new(intr.width, intr.height);
                    self.map
                        .insert_frame(&r.rgb, &r.depth, intr, &estimate.pose, &none, self.stride)
                }
                _ => self
                    .map
                    .insert_frame(&frame.rgb, &frame.depth, intr, &estimate.pose, mask, self.stride),
            };
            inserted.map_err(stage_err("map", t))?;
        }
        times[INPAINT] = ms(t1 - t0);
        times[MAP] = ms(clock.now() - t1);
        Ok(Mapped {
            masks,
            reports,
            estimate,
            times,
        })
    }
}

struct Logs {
    dir: PathBuf,
    odometry: BufWriter<File>,
    tracks: BufWriter<File>,
    masks: BufWriter<File>,
}

fn create(path: PathBuf) -> Result<BufWriter<File>> {
    File::create(&path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

impl Logs {
    fn create(dir: &Path, intr: &Intrinsics) -> Result<Self> {
        let mut logs = Logs {
            dir: dir.to_path_buf(),
            odometry: create(dir.join(ODOMETRY_LOG))?,
            tracks: create(dir.join(TRACKS_LOG))?,
            masks: create(dir.join(MASKS_LOG))?,
        };
        let header = format!("# {} {}\n", intr.width, intr.height);
        logs.masks
            .write_all(header.as_bytes())
            .map_err(|e| Error::io(dir.join(MASKS_LOG), e))?;
        Ok(logs)
    }

    fn write(&mut self, m: Mapped, clock: &dyn Clock) -> Result<(OdometryEstimate, StageTimes)> {
        let t0 = clock.now();
        let t = m.estimate.timestamp;
        let io = |name: &str| {
            let p = self.dir.join(name);
            move |e| stage_err("log", t)(Error::io(p, e))
        };
        writeln!(self.odometry, "{}", format_health_line(&m.estimate)).map_err(io(ODOMETRY_LOG))?;
        for r in &m.reports {
            writeln!(self.tracks, "{}", format_report_line(t, r)).map_err(io(TRACKS_LOG))?;
        }
        writeln!(self.masks, "{t:.6} odometry {}", m.masks.odometry_mask.to_rle_line()).map_err(io(MASKS_LOG))?;
        writeln!(self.masks, "{t:.6} mapping {}", m.masks.mapping_mask.to_rle_line()).map_err(io(MASKS_LOG))?;
        let mut times = m.times;
        times[LOG] = ms(clock.now() - t0);
        Ok((m.estimate, times))
    }

    fn finish(mut self) -> Result<()> {
        for (w, name) in [
            (&mut self.odometry, ODOMETRY_LOG),
            (&mut self.tracks, TRACKS_LOG),
            (&mut self.masks, MASKS_LOG),
        ] {
            w.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        Ok(())
    }
}

fn forward<A, B>(rx: Receiver<Result<A>>, tx: SyncSender<Result<B>>, mut f: impl FnMut(A) -> Result<B>) {
    for msg in rx {
        let r = msg.and_then(&mut f);
        let stop = r.is_err();
        if tx.send(r).is_err() || stop {
            break;
        }
    }
}

type FrameResults = Vec<(OdometryEstimate, StageTimes)>;

fn drive_sequential(
    n: usize,
    loader: &Loader,
    core: &mut Core,
    mapper: &mut Mapper,
    logs: &mut Logs,
    clock: &dyn Clock,
) -> Result<FrameResults> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let l = loader.load(i, clock)?;
        let tr = core.process(l, clock)?;
        let m = mapper.process(tr, clock)?;
        out.push(logs.write(m, clock)?);
    }
    Ok(out)
}

fn drive_pipelined(
    n: usize,
    capacity: usize,
    loader: &Loader,
    mut core: Core,
    mut mapper: Mapper,
    logs: &mut Logs,
    clock: &dyn Clock,
) -> Result<(FrameResults, Mapper)> {
    thread::scope(|s| {
        let (tx_load, rx_load) = sync_channel::<Result<Loaded>>(capacity);
        let (tx_track, rx_track) = sync_channel::<Result<Tracked>>(capacity);
        let (tx_map, rx_map) = sync_channel::<Result<Mapped>>(capacity);
        s.spawn(move || {
            for i in 0..n {
                let r = loader.load(i, clock);
                let stop = r.is_err();
                if tx_load.send(r).is_err() || stop {
                    break;
                }
            }
        });
        s.spawn(move || forward(rx_load, tx_track, |l| core.process(l, clock)));
        let map_worker = s.spawn(move || {
            forward(rx_track, tx_map, |t| mapper.process(t, clock));
            mapper
        });
        let mut out = Vec::with_capacity(n);
        let mut failure = None;
        for msg in rx_map {
            match msg.and_then(|m| logs.write(m, clock)) {
                Ok(r) => out.push(r),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let mapper = map_worker.join().expect("map worker panicked");
        match failure {
            Some(e) => Err(e),
            None => Ok((out, mapper)),
        }
    })
}

pub fn run(manifest: &RunManifest) -> Result<RunSummary> {
    run_with(manifest, Execution::Pipelined, &SystemClock::default())
}

/// Sequential run timed with `clock`.
pub fn bench(manifest: &RunManifest, clock: &dyn Clock) -> Result<TimingReport> {
    Ok(run_with(manifest, Execution::Sequential, clock)?.timing)
}

pub fn run_with(manifest: &RunManifest, execution: Execution, clock: &dyn Clock) -> Result<RunSummary> {
    let cfg = manifest.load_config()?;
    let source = manifest.resolve_detections()?;
    let seq = Sequence::open(&manifest.sequence, Intrinsics::tum_fr3(), cfg.max_dt)?;
    if seq.is_empty() {
        return Err(Error::format(
            seq.dir.join("rgb.txt"),
            0,
            "no frame has a depth image within max_dt",
        ));
    }
    let gt_path = seq.groundtruth_path();
    let gt = if gt_path.is_file() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    let detections = Detections::open(source)?;
    let odometry = match manifest.mode {
        Mode::GtOdometry => Odometry::ground_truth(
            gt.clone()
                .ok_or_else(|| Error::Config("gt-odometry mode needs groundtruth.txt in the sequence".into()))?,
        ),
        _ => {
            let initial = gt
                .as_ref()
                .and_then(|g| g.pose_near(seq.entries[0].timestamp, cfg.max_dt))
                .unwrap_or_else(Pose::identity);
            Odometry::new(cfg.odometry.clone(), stage_seed(manifest.seed, 1), initial)?
        }
    };
    let out_dir = &manifest.output;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    if let Some(d) = &cfg.inpaint.dump_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let config_path = out_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(config_path, e))?;

    let loader = Loader {
        seq: &seq,
        detections: &detections,
        max_dt: cfg.max_dt,
    };
    let mut core = Core {
        tracker: Tracker::new(cfg.tracking.clone())?,
        odometry,
        mode: manifest.mode,
    };
    let mut mapper = Mapper {
        map: VoxelMap::new(cfg.map.voxel_size),
        stride: cfg.map.stride,
        inpaint: cfg.inpaint.clone(),
    };
    let mut logs = Logs::create(out_dir, &seq.intrinsics)?;
    let n = seq.len();

    let start = clock.now();
    let results = match execution {
        Execution::Sequential => drive_sequential(n, &loader, &mut core, &mut mapper, &mut logs, clock)?,
        Execution::Pipelined => {
            let (r, m) = drive_pipelined(n, cfg.queue_capacity, &loader, core, mapper, &mut logs, clock)?;
            mapper = m;
            r
        }
    };
    let end_to_end = ms(clock.now() - start);
    logs.finish()?;

    let times: Vec<StageTimes> = results.iter().map(|r| r.1).collect();
    let estimates: Vec<OdometryEstimate> = results.into_iter().map(|r| r.0).collect();
    let trajectory = Trajectory::from_entries(estimates.iter().map(|e| (e.timestamp, e.pose)).collect())?;
    write_trajectory(&trajectory, &out_dir.join(TRAJECTORY_FILE))?;
    let map = mapper.map;
    if !map.is_empty() {
        export_ply(&map, &out_dir.join(MAP_FILE))?;
    }
    let timing = TimingReport::from_samples(&times, end_to_end);
    write_text(&out_dir.join(TIMING_FILE), &timing.to_text())?;

    let eval = match &gt {
        Some(gt) => write_eval(&trajectory, gt, cfg.max_dt, out_dir)?,
        None => None,
    };
    let volumes_path = seq.dir.join(VOLUMES_FILE);
    let contamination = if volumes_path.is_file() {
        let report = contamination(&map, &read_dynamic_volumes(&volumes_path)?);
        write_text(&out_dir.join(CONTAMINATION_FILE), &report.to_text())?;
        Some(report)
    } else {
        None
    };
    Ok(RunSummary {
        frames: estimates.len(),
        trajectory,
        estimates,
        map_points: map.len(),
        eval,
        contamination,
        timing,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes report, per-pair CSV and plot; too little overlap is recorded, not fatal.
fn write_eval(est: &Trajectory, gt: &Trajectory, max_dt: f64, dir: &Path) -> Result<Option<EvalReport>> {
    match compute_ate(est, gt, max_dt) {
        Ok(r) => {
            write_text(&dir.join(EVAL_FILE), &r.to_text())?;
            write_text(&dir.join(ATE_CSV), &r.to_csv())?;
            emit_plot(est, gt, max_dt, &dir.join(PLOT_FILE))?;
            Ok(Some(r))
        }
        Err(e @ Error::InsufficientOverlap(_)) => {
            write_text(&dir.join(EVAL_FILE), &format!("unavailable: {e}\n"))?;
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// ATE of the trajectory file `est` against `gt`; report files go to `out` if given.
pub fn cmd_eval(est: &Path, gt: &Path, max_dt: f64, out: Option<&Path>) -> Result<EvalReport> {
    let e = read_trajectory(est)?;
    let g = read_trajectory(gt)?;
    let report = compute_ate(&e, &g, max_dt)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
        write_text(&dir.join(EVAL_FILE), &report.to_text())?;
        write_text(&dir.join(ATE_CSV), &report.to_csv())?;
        emit_plot(&e, &g, max_dt, &dir.join(PLOT_FILE))?;
    }
    Ok(report)
}

pub fn cmd_synth(spec: &Path, out: &Path, noise: &NoiseSpec) -> Result<GroundTruth> {
    noise.validate()?;
    render_sequence(&read_scene_spec(spec)?, out, noise)
}

/// Parses a masks log back into per-frame masks.
pub fn read_masks_log(path: &Path) -> Result<Vec<MaskRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let bad = |i: usize, m: &str| Error::format(path, i + 1, m);
    let (w, h) = match lines.next().and_then(|(_, l)| l.strip_prefix("# ")) {
        Some(dims) => {
            let d: Vec<u32> = dims.split_whitespace().filter_map(|s| s.parse().ok()).collect();
            match d[..] {
                [w, h] => (w, h),
                _ => return Err(bad(0, "header must be `# width height`")),
            }
        }
        None => return Err(bad(0, "header must be `# width height`")),
    };
    let mut parse = |expect: &str| -> Result<Option<(f64, Mask)>> {
        let Some((i, line)) = lines.next() else { return Ok(None) };
        let mut it = line.split_whitespace();
        let t: f64 = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(i, "bad timestamp"))?;
        if it.next() != Some(expect) {
            return Err(bad(i, &format!("expected `{expect}` record")));
        }
        let runs: Vec<usize> = it
            .map(|s| s.parse().map_err(|_| bad(i, "bad run length")))
            .collect::<Result<_>>()?;
        let m = Mask::from_runs(w, h, &runs).map_err(|e| bad(i, &e.to_string()))?;
        Ok(Some((t, m)))
    };
    let mut out = Vec::new();
    while let Some((timestamp, odometry)) = parse("odometry")? {
        let (t2, mapping) = parse("mapping")?.ok_or_else(|| Error::format(path, 0, "truncated masks log"))?;
        if t2 != timestamp {
            return Err(Error::format(path, 0, "odometry and mapping records out of step"));
        }
        out.push(MaskRecord {
            timestamp,
            odometry,
            mapping,
        });
    }
    Ok(out)
}

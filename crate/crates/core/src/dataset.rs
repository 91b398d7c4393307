//! TUM RGB-D sequence layout, per-frame detection files and trajectory text files.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{Intrinsics, Pose};
use crate::mask::{BBox, Mask};

/// 16-bit depth image in raw sensor units; 0 marks an invalid measurement.
pub type DepthImage = ImageBuffer<Luma<u16>, Vec<u16>>;

/// Default RGB/depth and detection association window (seconds).
pub const DEFAULT_MAX_DT: f64 = 0.02;

/// Per-sequence camera file read by [`Sequence::open`] when present.
pub const CAMERA_FILE: &str = "camera.toml";

#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: Intrinsics,
}

impl Frame {
    pub fn new(timestamp: f64, rgb: RgbImage, depth: DepthImage, intrinsics: Intrinsics) -> Result<Self> {
        if rgb.dimensions() != (intrinsics.width, intrinsics.height)
            || depth.dimensions() != (intrinsics.width, intrinsics.height)
        {
            return Err(Error::Shape(format!(
                "frame at t={timestamp}: rgb {:?} / depth {:?} vs intrinsics {}x{}",
                rgb.dimensions(),
                depth.dimensions(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(Error::Precondition(format!("bad timestamp {timestamp}")));
        }
        Ok(Frame {
            timestamp,
            rgb,
            depth,
            intrinsics,
        })
    }
}

/// One segmented instance as produced by an upstream instance-segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: i32,
    pub class_name: String,
    pub score: f64,
    pub bbox: BBox,
    pub mask: Mask,
}

/// Greedy mutual-nearest timestamp matching.
///
/// Candidate pairs within `max_dt` are taken in order of increasing time difference,
/// each index used at most once; the result is sorted by the index into `a`.
pub fn associate_timestamps(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::new();
    let mut start = 0usize;
    for (i, &ta) in a.iter().enumerate() {
        while start < b.len() && b[start] < ta - max_dt {
            start += 1;
        }
        let mut j = start;
        while j < b.len() && b[j] <= ta + max_dt {
            let d = (ta - b[j]).abs();
            if d <= max_dt {
                candidates.push((d, ta + b[j], i, j));
            }
            j += 1;
        }
    }
    // The (difference, timestamp sum) key is symmetric in a and b.
    candidates.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap_or(Ordering::Equal)
            .then(x.1.partial_cmp(&y.1).unwrap_or(Ordering::Equal))
            .then((x.2 + x.3).cmp(&(y.2 + y.3)))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, _, i, j) in candidates {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a TUM index file (`timestamp filename` per line, `#` comments).
fn read_index(path: &Path) -> Result<Vec<(f64, String)>> {
    let text = read_text(path)?;
    let mut out: Vec<(f64, String)> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (Some(ts), Some(file)) = (it.next(), it.next()) else {
            return Err(Error::format(path, ln + 1, "expected `timestamp filename`"));
        };
        let t: f64 = ts
            .parse()
            .map_err(|_| Error::format(path, ln + 1, format!("bad timestamp `{ts}`")))?;
        if let Some(&(prev, _)) = out.last() {
            if t <= prev {
                return Err(Error::format(path, ln + 1, "timestamps not strictly increasing"));
            }
        }
        out.push((t, file.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub rgb_path: PathBuf,
    pub depth_path: PathBuf,
}

/// Index bookkeeping from opening a sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rgb_entries: usize,
    pub depth_entries: usize,
    pub paired: usize,
    /// RGB entries without a depth image inside the association window.
    pub skipped: usize,
}

/// A TUM-format sequence; frames are decoded lazily in timestamp order.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub entries: Vec<FrameEntry>,
    pub report: LoadReport,
}

impl Sequence {
    /// Opens `dir`, taking intrinsics from `camera.toml` if present, otherwise `fallback`.
    pub fn open(dir: impl AsRef<Path>, fallback: Intrinsics, max_dt: f64) -> Result<Self> {
        let dir = dir.as_ref();
        let intr = read_camera_file(dir)?.unwrap_or(fallback);
        Self::open_with(dir, intr, max_dt)
    }

    pub fn open_with(dir: impl AsRef<Path>, intrinsics: Intrinsics, max_dt: f64) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        intrinsics.validate()?;
        let rgb = read_index(&dir.join("rgb.txt"))?;
        let depth = read_index(&dir.join("depth.txt"))?;
        let ta: Vec<f64> = rgb.iter().map(|e| e.0).collect();
        let tb: Vec<f64> = depth.iter().map(|e| e.0).collect();
        let pairs = associate_timestamps(&ta, &tb, max_dt);
        let entries: Vec<FrameEntry> = pairs
            .iter()
            .map(|&(i, j)| FrameEntry {
                timestamp: rgb[i].0,
                rgb_path: dir.join(&rgb[i].1),
                depth_path: dir.join(&depth[j].1),
            })
            .collect();
        let report = LoadReport {
            rgb_entries: rgb.len(),
            depth_entries: depth.len(),
            paired: entries.len(),
            skipped: rgb.len() - entries.len(),
        };
        Ok(Sequence {
            dir,
            intrinsics,
            entries,
            report,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }

    pub fn load_frame(&self, index: usize) -> Result<Frame> {
        let e = &self.entries[index];
        let rgb = image::open(&e.rgb_path)
            .map_err(|err| Error::Image {
                path: e.rgb_path.clone(),
                msg: err.to_string(),
            })?
            .to_rgb8();
        let depth = match image::open(&e.depth_path).map_err(|err| Error::Image {
            path: e.depth_path.clone(),
            msg: err.to_string(),
        })? {
            image::DynamicImage::ImageLuma16(d) => d,
            _ => {
                return Err(Error::Image {
                    path: e.depth_path.clone(),
                    msg: "depth image must be 16-bit single channel".into(),
                })
            }
        };
        Frame::new(e.timestamp, rgb, depth, self.intrinsics)
    }

    /// Lazily decoded frames in timestamp order.
    pub fn frames(&self) -> impl Iterator<Item = Result<Frame>> + '_ {
        (0..self.entries.len()).map(move |i| self.load_frame(i))
    }

    pub fn groundtruth_path(&self) -> PathBuf {
        self.dir.join("groundtruth.txt")
    }
}

pub fn load_sequence(dir: impl AsRef<Path>, fallback: Intrinsics, max_dt: f64) -> Result<Sequence> {
    Sequence::open(dir, fallback, max_dt)
}

pub fn read_camera_file(dir: &Path) -> Result<Option<Intrinsics>> {
    let path = dir.join(CAMERA_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = read_text(&path)?;
    let intr: Intrinsics = toml::from_str(&text).map_err(|e| Error::format(&path, 0, e.to_string()))?;
    intr.validate()?;
    Ok(Some(intr))
}

pub fn write_camera_file(dir: &Path, intr: &Intrinsics) -> Result<()> {
    let path = dir.join(CAMERA_FILE);
    let text = toml::to_string(intr).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Detection file name for a frame timestamp.
pub fn detection_file_name(timestamp: f64) -> String {
    format!("{timestamp:.6}.txt")
}

pub fn write_detections(path: &Path, width: u32, height: u32, dets: &[Detection]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{width} {height} {}", dets.len()).map_err(io)?;
    for d in dets {
        writeln!(
            w,
            "{} {} {} {} {} {} {}",
            d.class_id, d.class_name, d.score, d.bbox.u_min, d.bbox.v_min, d.bbox.u_max, d.bbox.v_max
        )
        .map_err(io)?;
        writeln!(w, "{}", d.mask.to_rle_line()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, path: &Path, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::format(path, line, format!("missing {what}")))?;
    tok.parse()
        .map_err(|_| Error::format(path, line, format!("bad {what} `{tok}`")))
}

/// Reads a detection file, returning the frame size and the decoded instances.
pub fn read_detections(path: &Path) -> Result<(u32, u32, Vec<Detection>)> {
    let text = read_text(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let Some((ln, header)) = lines.next() else {
        return Ok((0, 0, Vec::new()));
    };
    let mut it = header.split_whitespace();
    let w: u32 = parse_num(it.next(), path, ln, "width")?;
    let h: u32 = parse_num(it.next(), path, ln, "height")?;
    let n: usize = parse_num(it.next(), path, ln, "instance count")?;
    let mut dets = Vec::with_capacity(n);
    for k in 0..n {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::format(path, ln, format!("missing instance {k}")))?;
        let mut it = line.split_whitespace();
        let class_id: i32 = parse_num(it.next(), path, ln, "class id")?;
        let class_name = it
            .next()
            .ok_or_else(|| Error::format(path, ln, "missing class name"))?
            .to_string();
        let score: f64 = parse_num(it.next(), path, ln, "score")?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::format(path, ln, format!("score {score} outside [0, 1]")));
        }
        let bbox = BBox {
            u_min: parse_num(it.next(), path, ln, "u_min")?,
            v_min: parse_num(it.next(), path, ln, "v_min")?,
            u_max: parse_num(it.next(), path, ln, "u_max")?,
            v_max: parse_num(it.next(), path, ln, "v_max")?,
        };
        if !bbox.is_valid_for(w, h) {
            return Err(Error::format(path, ln, format!("invalid bbox {bbox:?}")));
        }
        let (ln, rle) = lines
            .next()
            .ok_or_else(|| Error::format(path, ln, "missing mask run-length line"))?;
        let runs = rle
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::format(path, ln, format!("bad run length `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = Mask::from_runs(w, h, &runs).map_err(|e| Error::format(path, ln, e.to_string()))?;
        dets.push(Detection {
            class_id,
            class_name,
            score,
            bbox,
            mask,
        });
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::format(path, ln, "trailing content after last instance"));
    }
    Ok((w, h, dets))
}

/// Directory of per-frame detection files named by timestamp.
#[derive(Debug, Clone)]
pub struct DetectionStore {
    pub dir: PathBuf,
    index: Vec<(f64, PathBuf)>,
}

impl DetectionStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let listing = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut index = Vec::new();
        for entry in listing {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(t) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<f64>().ok())
            else {
                continue;
            };
            index.push((t, path));
        }
        index.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        Ok(DetectionStore { dir, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Instances of the detection file nearest to `timestamp` within `max_dt`.
    pub fn load(&self, timestamp: f64, max_dt: f64) -> Result<Vec<Detection>> {
        let pos = self.index.partition_point(|e| e.0 < timestamp);
        let best = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter_map(|i| self.index.get(i))
            .map(|(t, p)| ((t - timestamp).abs(), p))
            .filter(|(d, _)| *d <= max_dt)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        match best {
            Some((_, path)) => Ok(read_detections(path)?.2),
            None => Ok(Vec::new()),
        }
    }
}

pub fn load_detections(dir: impl AsRef<Path>, timestamp: f64, max_dt: f64) -> Result<Vec<Detection>> {
    DetectionStore::open(dir)?.load(timestamp, max_dt)
}

/// Timestamped camera poses with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose<f64>)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(f64, Pose<f64>)>) -> Result<Self> {
        let mut t = Trajectory::new();
        for (ts, p) in entries {
            t.push(ts, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, timestamp: f64, pose: Pose<f64>) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if timestamp <= last {
                return Err(Error::TimeOrder(format!(
                    "trajectory timestamp {timestamp} after {last}"
                )));
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn entries(&self) -> &[(f64, Pose<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Pose with the nearest timestamp within `max_dt`.
    pub fn pose_near(&self, timestamp: f64, max_dt: f64) -> Option<Pose<f64>> {
        let pos = self.entries.partition_point(|e| e.0 < timestamp);
        [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter_map(|i| self.entries.get(i))
            .map(|(t, p)| ((t - timestamp).abs(), *p))
            .filter(|(d, _)| *d <= max_dt)
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal))
            .map(|(_, p)| p)
    }
}

/// One TUM trajectory line: `timestamp tx ty tz qx qy qz qw`.
pub fn format_pose_line(timestamp: f64, p: &Pose<f64>) -> String {
    let q = p.rotation.quaternion();
    let t = &p.translation;
    format!("{timestamp:.6} {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (t, p) in traj.entries() {
        writeln!(w, "{}", format_pose_line(*t, p)).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let text = read_text(path)?;
    let mut traj = Trajectory::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, ln + 1, e.to_string()))?;
        if vals.len() != 8 {
            return Err(Error::format(
                path,
                ln + 1,
                format!("expected 8 fields, found {}", vals.len()),
            ));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(path, ln + 1, "non-finite value"));
        }
        let pose = Pose::from_parts(
            Vector3::new(vals[1], vals[2], vals[3]),
            vals[4],
            vals[5],
            vals[6],
            vals[7],
        );
        traj.push(vals[0], pose).map_err(|_| {
            Error::TimeOrder(format!(
                "{}:{}: timestamp {} not after previous entry",
                path.display(),
                ln + 1,
                vals[0]
            ))
        })?;
    }
    Ok(traj)
}

/// Writes a TUM index file (`rgb.txt` / `depth.txt`).
pub fn write_index(path: &Path, header: &str, entries: &[(f64, String)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# {header}").map_err(io)?;
    writeln!(w, "# timestamp filename").map_err(io)?;
    for (t, f) in entries {
        writeln!(w, "{t:.6} {f}").map_err(io)?;
    }
    w.flush().map_err(io)
}

//! Synthetic RGB-D sequences of textured boxes in a room, with exact ground truth.
//!
//! The world is z-up. Every pixel is ray cast through its integer pixel coordinate
//! against the room shell (seen from inside), static boxes and moving objects. Depth is
//! the camera-frame z of the nearest hit. Surfaces carry a value-noise checkerboard in
//! box-local coordinates, so textures travel with moving objects.

mod perturb;
mod scene;

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{
    detection_file_name, write_camera_file, write_detections, write_index, write_trajectory, DepthImage, Detection,
    Trajectory,
};
use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::map::Aabb;
use crate::mask::Mask;
use crate::Point3;

pub use perturb::{perturb_detections, Perturbation};
pub use scene::{class_id, CameraKey, NoiseSpec, ObjectSpec, Room, SceneSpec, Segment, StaticBox};

pub const OBJECTS_FILE: &str = "objects.txt";
pub const VOLUMES_FILE: &str = "dynamic_volumes.txt";
pub const DETECTIONS_DIR: &str = "detections";

/// Margin added around per-frame object boxes in the volume sidecar (meters).
pub const VOLUME_MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Surface {
    Room,
    Static(usize),
    Object(usize),
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    axis: usize,
    /// Outward normal sign of the face hit, seen from the ray.
    sign: f64,
    surface: Surface,
}

fn slab(o: &Vector3<f64>, inv: &Vector3<f64>, min: &Point3, max: &Point3) -> (f64, usize, f64, usize) {
    let (mut tn, mut an) = (f64::NEG_INFINITY, 0);
    let (mut tf, mut af) = (f64::INFINITY, 0);
    for a in 0..3 {
        let t1 = (min[a] - o[a]) * inv[a];
        let t2 = (max[a] - o[a]) * inv[a];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        if lo > tn {
            tn = lo;
            an = a;
        }
        if hi < tf {
            tf = hi;
            af = a;
        }
    }
    (tn, an, tf, af)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn cell_hash(seed: u64, surface: u64, face: u64, i: i64, j: i64) -> u64 {
    let mut h = splitmix(seed ^ surface.wrapping_mul(0x100_0000_01B3));
    h = splitmix(h ^ face);
    h = splitmix(h ^ i as u64);
    splitmix(h ^ (j as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))
}

/// One rendered frame with per-object visibility masks.
#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub timestamp: f64,
    pub pose: Pose<f64>,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    /// `(object index, mask)` for objects with at least one visible pixel.
    pub object_masks: Vec<(usize, Mask)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub timestamp: f64,
    pub object_id: usize,
    pub class_name: String,
    pub centroid: Point3,
    pub velocity: Vector3<f64>,
    pub mask_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub trajectory: Trajectory,
    pub objects: Vec<ObjectRecord>,
    /// Object boxes at every frame, inflated by [`VOLUME_MARGIN`].
    pub volumes: Vec<Aabb>,
}

impl SceneSpec {
    /// Nearest hit along the ray through pixel `(u, v)`; `t` is the camera-frame depth.
    fn cast(&self, pose: &Pose<f64>, objects: &[(Point3, Point3)], u: f64, v: f64) -> Option<Hit> {
        let k = &self.intrinsics;
        let d_cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let d = pose.rotation * d_cam;
        let o = pose.translation;
        let inv = d.map(|x| 1.0 / x);
        let rmin = Point3::from(self.room.min);
        let rmax = Point3::from(self.room.max);
        let (_, _, tf, af) = slab(&o, &inv, &rmin, &rmax);
        let mut best = (tf > 0.0).then_some(Hit {
            t: tf,
            axis: af,
            sign: -d[af].signum(),
            surface: Surface::Room,
        });
        let mut consider = |min: &Point3, max: &Point3, surface: Surface| {
            let (tn, an, tf, _) = slab(&o, &inv, min, max);
            if tn <= tf && tn > 1e-9 && best.is_none_or(|b| tn < b.t) {
                best = Some(Hit {
                    t: tn,
                    axis: an,
                    sign: -d[an].signum(),
                    surface,
                });
            }
        };
        for (i, b) in self.boxes.iter().enumerate() {
            consider(&Point3::from(b.min), &Point3::from(b.max), Surface::Static(i));
        }
        for (i, (min, max)) in objects.iter().enumerate() {
            consider(min, max, Surface::Object(i));
        }
        best
    }

    fn shade(&self, pose: &Pose<f64>, objects: &[(Point3, Point3)], u: f64, v: f64, hit: &Hit) -> Rgb<u8> {
        let k = &self.intrinsics;
        let d = pose.rotation * Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        let p = pose.translation + d * hit.t;
        let (origin, textured, tint, cell, sid) = match hit.surface {
            Surface::Room => {
                let floor = hit.axis == 2 && hit.sign > 0.0;
                let tint = if floor { [0.95, 0.85, 0.7] } else { [0.9, 0.92, 1.0] };
                (
                    Vector3::from(self.room.min),
                    self.room.textured,
                    tint,
                    self.room.cell,
                    0,
                )
            }
            Surface::Static(i) => {
                let b = &self.boxes[i];
                (Vector3::from(b.min), b.textured, b.tint(i), b.cell, 1 + i as u64)
            }
            Surface::Object(i) => {
                let o = &self.objects[i];
                (objects[i].0.coords, o.textured, o.tint(), o.cell, 1000 + i as u64)
            }
        };
        let local = p - origin;
        let (a, b) = ((hit.axis + 1) % 3, (hit.axis + 2) % 3);
        let level = if textured {
            let i = (local[a] / cell).floor() as i64;
            let j = (local[b] / cell).floor() as i64;
            let face = (hit.axis as u64) * 2 + u64::from(hit.sign > 0.0);
            let h = cell_hash(self.seed, sid, face, i, j);
            40.0 + (h % 176) as f64
        } else {
            150.0
        };
        let mut n = Vector3::zeros();
        n[hit.axis] = hit.sign;
        let light = Vector3::new(0.35, 0.25, 0.9).normalize();
        let s = 0.65 + 0.35 * n.dot(&light);
        Rgb(tint.map(|c| (c * level * s).round().clamp(0.0, 255.0) as u8))
    }

    /// Renders frame `k` without noise.
    pub fn render_frame(&self, k: usize) -> RenderedFrame {
        let t = self.frame_time(k);
        let pose = self.camera_pose(t);
        let objects: Vec<(Point3, Point3)> = (0..self.objects.len()).map(|i| self.object_bounds(i, t)).collect();
        let intr = &self.intrinsics;
        let (w, h) = (intr.width, intr.height);
        let mut rgb = RgbImage::new(w, h);
        let mut depth = DepthImage::new(w, h);
        let mut masks: Vec<Mask> = vec![Mask::new(w, h); self.objects.len()];
        let rows: Vec<Vec<(Rgb<u8>, u16, Option<usize>)>> = (0..h)
            .into_par_iter()
            .map(|v| {
                (0..w)
                    .map(|u| {
                        let (uf, vf) = (f64::from(u), f64::from(v));
                        match self.cast(&pose, &objects, uf, vf) {
                            Some(hit) => {
                                let raw = (hit.t * intr.depth_scale).round();
                                let d = if raw >= 1.0 && raw <= f64::from(u16::MAX) {
                                    raw as u16
                                } else {
                                    0
                                };
                                let obj = match hit.surface {
                                    Surface::Object(i) => Some(i),
                                    _ => None,
                                };
                                (self.shade(&pose, &objects, uf, vf, &hit), d, obj)
                            }
                            None => (Rgb([0, 0, 0]), 0, None),
                        }
                    })
                    .collect()
            })
            .collect();
        for (v, row) in rows.into_iter().enumerate() {
            for (u, (c, d, obj)) in row.into_iter().enumerate() {
                rgb.put_pixel(u as u32, v as u32, c);
                depth.put_pixel(u as u32, v as u32, image::Luma([d]));
                if let Some(i) = obj {
                    masks[i].set(u as u32, v as u32, true);
                }
            }
        }
        RenderedFrame {
            timestamp: t,
            pose,
            rgb,
            depth,
            object_masks: masks.into_iter().enumerate().filter(|(_, m)| !m.is_empty()).collect(),
        }
    }

    /// Camera-frame depth (meters) along the ray through a possibly fractional pixel.
    pub fn ray_depth(&self, k: usize, u: f64, v: f64) -> Option<f64> {
        let t = self.frame_time(k);
        let pose = self.camera_pose(t);
        let objects: Vec<(Point3, Point3)> = (0..self.objects.len()).map(|i| self.object_bounds(i, t)).collect();
        self.cast(&pose, &objects, u, v).map(|h| h.t)
    }

    /// Ground-truth detections for a rendered frame: perfect masks, score 1.
    pub fn detections(&self, frame: &RenderedFrame) -> Vec<Detection> {
        frame
            .object_masks
            .iter()
            .map(|(i, m)| {
                let class = &self.objects[*i].class;
                Detection {
                    class_id: class_id(class),
                    class_name: class.clone(),
                    score: 1.0,
                    bbox: m.bbox().expect("non-empty mask"),
                    mask: m.clone(),
                }
            })
            .collect()
    }
}

fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(Cursor::new(&mut buf), CompressionType::Fast, FilterType::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            msg: e.to_string(),
        })?;
    Ok(buf)
}

fn encode_png_depth(img: &DepthImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(img.as_raw().len() * 2);
    for &d in img.as_raw() {
        bytes.extend_from_slice(&d.to_ne_bytes());
    }
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(Cursor::new(&mut buf), CompressionType::Fast, FilterType::Sub)
        .write_image(&bytes, img.width(), img.height(), ExtendedColorType::L16)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            msg: e.to_string(),
        })?;
    Ok(buf)
}

fn add_depth_noise(depth: &mut DepthImage, sigma_mm: f64, scale: f64, rng: &mut ChaCha8Rng) {
    if !(sigma_mm > 0.0) {
        return;
    }
    let n = Normal::new(0.0, sigma_mm / 1000.0 * scale).expect("finite sigma");
    for px in depth.pixels_mut() {
        if px[0] != 0 {
            let d = (f64::from(px[0]) + n.sample(rng)).round();
            px[0] = d.clamp(1.0, f64::from(u16::MAX)) as u16;
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `timestamp object_id class cx cy cz vx vy vz`
pub fn format_object_line(r: &ObjectRecord) -> String {
    format!(
        "{:.6} {} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        r.timestamp,
        r.object_id,
        r.class_name,
        r.centroid.x,
        r.centroid.y,
        r.centroid.z,
        r.velocity.x,
        r.velocity.y,
        r.velocity.z
    )
}

/// Reads the per-frame object boxes written next to a rendered sequence.
pub fn read_dynamic_volumes(path: &Path) -> Result<Vec<Aabb>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<f64> = line
            .split_whitespace()
            .skip(2)
            .map(|s| s.parse().map_err(|_| Error::format(path, i + 1, "bad number")))
            .collect::<Result<_>>()?;
        if f.len() != 6 {
            return Err(Error::format(
                path,
                i + 1,
                "expected `timestamp id xmin ymin zmin xmax ymax zmax`",
            ));
        }
        out.push(Aabb {
            min: Point3::new(f[0], f[1], f[2]),
            max: Point3::new(f[3], f[4], f[5]),
        });
    }
    Ok(out)
}

const CHUNK: usize = 32;

/// Renders the whole sequence into `out_dir` in TUM layout with detections and
/// ground-truth sidecars.
pub fn render_sequence(spec: &SceneSpec, out_dir: &Path, noise: &NoiseSpec) -> Result<GroundTruth> {
    spec.validate()?;
    noise.validate()?;
    for sub in ["rgb", "depth", DETECTIONS_DIR] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_camera_file(out_dir, &spec.intrinsics)?;
    let n = spec.frame_count();
    let mut rgb_index = Vec::with_capacity(n);
    let mut depth_index = Vec::with_capacity(n);
    let mut gt = GroundTruth {
        trajectory: Trajectory::default(),
        objects: Vec::new(),
        volumes: Vec::new(),
    };
    let mut object_lines = String::from("# timestamp object_id class cx cy cz vx vy vz\n");
    let mut volume_lines = String::from("# timestamp object_id xmin ymin zmin xmax ymax zmax\n");
    let pert = Perturbation {
        dropout: noise.detection_dropout,
        ..Perturbation::default()
    };
    let (w, h) = (spec.intrinsics.width, spec.intrinsics.height);

    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let encoded: Vec<Result<(RenderedFrame, Vec<u8>, Vec<u8>, Vec<Detection>)>> = (start..end)
            .into_par_iter()
            .map(|k| {
                let mut f = spec.render_frame(k);
                let dets = spec.detections(&f);
                let dets = perturb_detections(&dets, &pert, noise.seed, k as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(noise.seed ^ splitmix(k as u64));
                add_depth_noise(
                    &mut f.depth,
                    noise.depth_sigma_mm,
                    spec.intrinsics.depth_scale,
                    &mut rng,
                );
                let rgb = encode_png_rgb(&f.rgb)?;
                let depth = encode_png_depth(&f.depth)?;
                Ok((f, rgb, depth, dets))
            })
            .collect();
        for item in encoded {
            let (f, rgb, depth, dets) = item?;
            let t = f.timestamp;
            let name = format!("{t:.6}.png");
            write_bytes(&out_dir.join("rgb").join(&name), &rgb)?;
            write_bytes(&out_dir.join("depth").join(&name), &depth)?;
            write_detections(&out_dir.join(DETECTIONS_DIR).join(detection_file_name(t)), w, h, &dets)?;
            rgb_index.push((t, format!("rgb/{name}")));
            depth_index.push((t, format!("depth/{name}")));
            gt.trajectory.push(t, f.pose)?;
            for (i, o) in spec.objects.iter().enumerate() {
                let (min, max) = spec.object_bounds(i, t);
                let rec = ObjectRecord {
                    timestamp: t,
                    object_id: i,
                    class_name: o.class.clone(),
                    centroid: nalgebra::center(&min, &max),
                    velocity: spec.object_velocity(i, t),
                    mask_pixels: f
                        .object_masks
                        .iter()
                        .find(|(j, _)| *j == i)
                        .map_or(0, |(_, m)| m.count()),
                };
                object_lines.push_str(&format_object_line(&rec));
                object_lines.push('\n');
                let m = Vector3::repeat(VOLUME_MARGIN);
                let vol = Aabb {
                    min: min - m,
                    max: max + m,
                };
                volume_lines.push_str(&format!(
                    "{t:.6} {i} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                    vol.min.x, vol.min.y, vol.min.z, vol.max.x, vol.max.y, vol.max.z
                ));
                gt.volumes.push(vol);
                gt.objects.push(rec);
            }
        }
    }
    write_index(&out_dir.join("rgb.txt"), "color images", &rgb_index)?;
    write_index(&out_dir.join("depth.txt"), "depth maps", &depth_index)?;
    write_trajectory(&gt.trajectory, &out_dir.join("groundtruth.txt"))?;
    write_bytes(&out_dir.join(OBJECTS_FILE), object_lines.as_bytes())?;
    write_bytes(&out_dir.join(VOLUMES_FILE), volume_lines.as_bytes())?;
    Ok(gt)
}

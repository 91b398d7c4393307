//! Voxel-downsampled static point-cloud map, contamination metric and PLY I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::DepthImage;
use crate::error::{Error, Result};
use crate::geom::{backproject, Intrinsics, Pose};
use crate::mask::Mask;
use crate::Point3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// meters
    pub voxel_size: f64,
    pub stride: u32,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            voxel_size: 0.05,
            stride: 4,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) || self.stride < 1 {
            return Err(Error::Config("map voxel_size must be > 0 and stride >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Cell {
    sum: Vector3<f64>,
    color_sum: Vector3<f64>,
    count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub position: Point3,
    pub color: [u8; 3],
    pub hits: u64,
}

pub type VoxelIndex = (i64, i64, i64);

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    voxel_size: f64,
    cells: BTreeMap<VoxelIndex, Cell>,
}

impl VoxelMap {
    pub fn new(voxel_size: f64) -> Self {
        VoxelMap {
            voxel_size,
            cells: BTreeMap::new(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index_of(&self, p: &Point3) -> VoxelIndex {
        let f = |x: f64| (x / self.voxel_size).floor() as i64;
        (f(p.x), f(p.y), f(p.z))
    }

    pub fn insert_point(&mut self, p: Point3, color: [u8; 3]) {
        let cell = self.cells.entry(self.index_of(&p)).or_default();
        cell.sum += p.coords;
        cell.color_sum += Vector3::new(f64::from(color[0]), f64::from(color[1]), f64::from(color[2]));
        cell.count += 1;
    }

    /// Back-projects every `stride`-th valid pixel not covered by `mask`; returns the
    /// number of points merged.
    pub fn insert_frame(
        &mut self,
        rgb: &RgbImage,
        depth: &DepthImage,
        intr: &Intrinsics,
        pose: &Pose<f64>,
        mask: &Mask,
        stride: u32,
    ) -> Result<usize> {
        let (w, h) = depth.dimensions();
        if rgb.dimensions() != (w, h) || mask.dims() != (w, h) {
            return Err(Error::Shape(format!(
                "rgb {:?}, depth {w}x{h}, mask {:?}",
                rgb.dimensions(),
                mask.dims()
            )));
        }
        let stride = stride.max(1) as usize;
        let mut n = 0;
        for v in (0..h).step_by(stride) {
            for u in (0..w).step_by(stride) {
                if mask.get(u, v) {
                    continue;
                }
                let Some(d) = intr.depth_meters(depth.get_pixel(u, v)[0]) else {
                    continue;
                };
                let pc = backproject(Vector2::new(f64::from(u), f64::from(v)), d, intr)?;
                self.insert_point(pose.transform(&pc), rgb.get_pixel(u, v).0);
                n += 1;
            }
        }
        Ok(n)
    }

    /// Cells in index order with their mean point and color.
    pub fn points(&self) -> impl Iterator<Item = (VoxelIndex, MapPoint)> + '_ {
        self.cells.iter().map(|(&k, c)| {
            let n = c.count as f64;
            let col = c.color_sum / n;
            (
                k,
                MapPoint {
                    position: Point3::from(c.sum / n),
                    color: [col.x, col.y, col.z].map(|x| x.round().clamp(0.0, 255.0) as u8),
                    hits: c.count,
                },
            )
        })
    }
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContaminationReport {
    pub total_points: usize,
    pub contaminated_points: usize,
    pub fraction: f64,
}

impl ContaminationReport {
    pub fn to_text(&self) -> String {
        format!(
            "total_points {}\ncontaminated_points {}\nfraction {:.6}\n",
            self.total_points, self.contaminated_points, self.fraction
        )
    }
}

/// Map points lying inside any of the dynamic volumes.
pub fn contamination(map: &VoxelMap, volumes: &[Aabb]) -> ContaminationReport {
    let total = map.len();
    let bad = map
        .points()
        .filter(|(_, p)| volumes.iter().any(|b| b.contains(&p.position)))
        .count();
    ContaminationReport {
        total_points: total,
        contaminated_points: bad,
        fraction: if total == 0 { 0.0 } else { bad as f64 / total as f64 },
    }
}

pub fn export_ply(map: &VoxelMap, path: &Path) -> Result<()> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", map.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property float {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {p}");
    }
    s.push_str("end_header\n");
    for (_, p) in map.points() {
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.color[0], p.color[1], p.color[2]
        );
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads an ASCII PLY written by [`export_ply`], checking the vertex count.
pub fn read_ply(path: &Path) -> Result<Vec<(Point3, [u8; 3])>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let mut count = None;
    let mut props = 0;
    let mut saw_magic = false;
    for (i, line) in lines.by_ref() {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["ply"] if ln == 1 => saw_magic = true,
            _ if !saw_magic => return Err(Error::format(path, ln, "missing ply magic")),
            ["format", "ascii", "1.0"] => {}
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::format(path, ln, "bad vertex count"))?,
                )
            }
            ["property", _, _] => props += 1,
            ["end_header"] => break,
            _ => return Err(Error::format(path, ln, format!("unexpected header line {line:?}"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, 0, "no vertex element"))?;
    if props != 6 {
        return Err(Error::format(path, 0, format!("expected 6 properties, found {props}")));
    }
    let mut out = Vec::with_capacity(count);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, i + 1, "bad vertex line");
        if f.len() != 6 {
            return Err(bad());
        }
        let x: Vec<f64> = f[..3]
            .iter()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let c: Vec<u8> = f[3..]
            .iter()
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.push((Point3::new(x[0], x[1], x[2]), [c[0], c[1], c[2]]));
    }
    if out.len() != count {
        return Err(Error::format(
            path,
            0,
            format!("header says {count} vertices, found {}", out.len()),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Luma, Rgb};

    fn intr() -> Intrinsics {
        Intrinsics::tum_fr3()
    }

    fn wall(depth_m: f64) -> (RgbImage, DepthImage) {
        let i = intr();
        (
            RgbImage::from_pixel(i.width, i.height, Rgb([10, 20, 30])),
            DepthImage::from_pixel(i.width, i.height, Luma([(depth_m * i.depth_scale) as u16])),
        )
    }

    #[test]
    fn fully_masked_frame_leaves_map_unchanged() {
        let (rgb, d) = wall(2.0);
        let mut m = VoxelMap::new(0.05);
        let full = Mask::from_fn(640, 480, |_, _| true);
        assert_eq!(
            m.insert_frame(&rgb, &d, &intr(), &Pose::identity(), &full, 4).unwrap(),
            0
        );
        assert!(m.is_empty());
    }

    #[test]
    fn flat_wall_cell_count_matches_area() {
        let (rgb, d) = wall(2.0);
        let i = intr();
        let mut m = VoxelMap::new(0.05);
        m.insert_frame(&rgb, &d, &i, &Pose::identity(), &Mask::new(640, 480), 4)
            .unwrap();
        // Visible wall extent at 2 m.
        let wx = 2.0 * 640.0 / i.fx;
        let wy = 2.0 * 480.0 / i.fy;
        let expected = wx * wy / (0.05 * 0.05);
        let n = m.len() as f64;
        assert!((n - expected).abs() <= 0.2 * expected, "{n} vs {expected}");
        assert!(m.points().all(|(_, p)| (p.position.z - 2.0).abs() < 1e-9));
    }

    #[test]
    fn double_insert_doubles_hits() {
        let (rgb, d) = wall(1.5);
        let mut once = VoxelMap::new(0.05);
        once.insert_frame(&rgb, &d, &intr(), &Pose::identity(), &Mask::new(640, 480), 4)
            .unwrap();
        let mut twice = once.clone();
        twice
            .insert_frame(&rgb, &d, &intr(), &Pose::identity(), &Mask::new(640, 480), 4)
            .unwrap();
        let a: Vec<_> = once.points().collect();
        let b: Vec<_> = twice.points().collect();
        assert_eq!(a.len(), b.len());
        for ((ka, pa), (kb, pb)) in a.iter().zip(&b) {
            assert_eq!(ka, kb);
            assert_eq!(pb.hits, 2 * pa.hits);
            assert!((pa.position - pb.position).norm() < 1e-12);
        }
    }

    #[test]
    fn points_stay_inside_their_voxel() {
        let mut m = VoxelMap::new(0.1);
        for k in 0..1000 {
            let x = k as f64 * 0.0137 - 5.0;
            m.insert_point(Point3::new(x, -x * 0.5, 0.3 * x), [0, 0, 0]);
        }
        for (k, p) in m.points() {
            assert_eq!(m.index_of(&p.position), k);
        }
    }

    #[test]
    fn insertion_order_insensitive() {
        let pts: Vec<Point3> = (0..500)
            .map(|k| Point3::new((k as f64 * 0.37).sin(), (k as f64 * 0.11).cos(), k as f64 * 0.001))
            .collect();
        let mut a = VoxelMap::new(0.05);
        let mut b = VoxelMap::new(0.05);
        for p in &pts {
            a.insert_point(*p, [1, 2, 3]);
        }
        for p in pts.iter().rev() {
            b.insert_point(*p, [1, 2, 3]);
        }
        for ((ka, pa), (kb, pb)) in a.points().zip(b.points()) {
            assert_eq!(ka, kb);
            assert!((pa.position - pb.position).norm() <= 1e-5);
        }
    }

    #[test]
    fn contamination_bounds() {
        let mut m = VoxelMap::new(0.05);
        assert_eq!(contamination(&m, &[]).fraction, 0.0);
        m.insert_point(Point3::new(0.0, 0.0, 1.0), [0, 0, 0]);
        m.insert_point(Point3::new(2.0, 0.0, 1.0), [0, 0, 0]);
        let room = Aabb {
            min: Point3::new(-10.0, -10.0, -10.0),
            max: Point3::new(10.0, 10.0, 10.0),
        };
        assert_eq!(contamination(&m, &[room]).fraction, 1.0);
        let half = Aabb {
            min: Point3::new(-0.5, -0.5, 0.5),
            max: Point3::new(0.5, 0.5, 1.5),
        };
        let r = contamination(&m, &[half]);
        assert_eq!((r.total_points, r.contaminated_points), (2, 1));
    }

    #[test]
    fn ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ply");
        let mut m = VoxelMap::new(0.05);
        assert!(matches!(export_ply(&m, &path), Err(Error::EmptyMap)));
        m.insert_point(Point3::new(0.123456, -1.5, 2.0), [255, 0, 7]);
        export_ply(&m, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 1\n"));
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].0 - Point3::new(0.123456, -1.5, 2.0)).norm() < 1e-4);
        assert_eq!(back[0].1, [255, 0, 7]);

        let (rgb, d) = wall(2.0);
        let mut big = VoxelMap::new(0.05);
        big.insert_frame(&rgb, &d, &intr(), &Pose::identity(), &Mask::new(640, 480), 8)
            .unwrap();
        export_ply(&big, &path).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.len(), big.len());
        for ((_, p), (q, _)) in big.points().zip(&back) {
            assert!((p.position - q).norm() < 1e-4);
        }
    }

    #[test]
    fn ply_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 1 2 3\n",
        )
        .unwrap();
        assert!(matches!(read_ply(&path), Err(Error::Format { .. })));
    }
}

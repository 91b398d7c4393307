//! FAST-9 corners with grid bucketing and 256-bit binary descriptors.

use image::{GrayImage, Luma, RgbImage};
use nalgebra::Vector2;
use rayon::prelude::*;

use super::pattern::PATTERN;
use crate::dataset::DepthImage;
use crate::error::{Error, Result};
use crate::geom::{backproject, Intrinsics};
use crate::mask::Mask;
use crate::Point3;

pub type Descriptor = [u64; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePoint {
    pub pixel: Vector2<f64>,
    /// Camera frame, meters.
    pub point_cam: Point3,
    pub descriptor: Descriptor,
    pub response: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    pub fast_threshold: u8,
    pub grid_cols: u32,
    pub grid_rows: u32,
    /// Pixels kept clear of the image edge (descriptor patch radius plus margin).
    pub border: u32,
    /// Half-size of the window that must have valid, continuous depth and no mask.
    pub window_radius: u32,
    /// Max relative depth spread inside the window.
    pub max_depth_spread: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        DetectorParams {
            fast_threshold: 20,
            grid_cols: 8,
            grid_rows: 6,
            border: 16,
            window_radius: 2,
            max_depth_spread: 0.03,
        }
    }
}

pub fn to_gray(rgb: &RgbImage) -> GrayImage {
    GrayImage::from_fn(rgb.width(), rgb.height(), |u, v| {
        let [r, g, b] = rgb.get_pixel(u, v).0;
        Luma([((77 * u32::from(r) + 150 * u32::from(g) + 29 * u32::from(b)) >> 8) as u8])
    })
}

/// Separable 5-tap binomial blur with clamped borders.
pub fn smooth(gray: &GrayImage) -> GrayImage {
    const K: [u32; 5] = [1, 4, 6, 4, 1];
    let (w, h) = gray.dimensions();
    let (wi, hi) = (w as i64, h as i64);
    let src = gray.as_raw();
    let mut tmp = vec![0u32; src.len()];
    for v in 0..hi {
        for u in 0..wi {
            let mut acc = 0;
            for (k, &kw) in K.iter().enumerate() {
                let x = (u + k as i64 - 2).clamp(0, wi - 1);
                acc += kw * u32::from(src[(v * wi + x) as usize]);
            }
            tmp[(v * wi + u) as usize] = acc;
        }
    }
    let mut out = vec![0u8; src.len()];
    for v in 0..hi {
        for u in 0..wi {
            let mut acc = 0;
            for (k, &kw) in K.iter().enumerate() {
                let y = (v + k as i64 - 2).clamp(0, hi - 1);
                acc += kw * tmp[(y * wi + u) as usize];
            }
            out[(v * wi + u) as usize] = ((acc + 128) >> 8) as u8;
        }
    }
    GrayImage::from_raw(w, h, out).expect("buffer size matches")
}

const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// FAST-9 score at an interior pixel, 0 when not a corner.
fn fast_score(img: &[u8], w: usize, u: usize, v: usize, t: i32) -> u32 {
    let p = i32::from(img[v * w + u]);
    let mut ring = [0i32; 16];
    for (k, &(dx, dy)) in CIRCLE.iter().enumerate() {
        let x = (u as i32 + dx) as usize;
        let y = (v as i32 + dy) as usize;
        ring[k] = i32::from(img[y * w + x]) - p;
    }
    // Quick rejection on the compass points.
    let bright = |d: i32| d > t;
    let dark = |d: i32| d < -t;
    let compass = [ring[0], ring[4], ring[8], ring[12]];
    if compass.iter().filter(|&&d| bright(d)).count() < 2 && compass.iter().filter(|&&d| dark(d)).count() < 2 {
        return 0;
    }
    let mut is_corner = false;
    for pred in [&bright as &dyn Fn(i32) -> bool, &dark] {
        let mut run = 0;
        for k in 0..32 {
            if pred(ring[k % 16]) {
                run += 1;
                if run >= 9 {
                    is_corner = true;
                    break;
                }
            } else {
                run = 0;
            }
        }
    }
    if !is_corner {
        return 0;
    }
    let sb: i32 = ring.iter().filter(|&&d| bright(d)).map(|&d| d - t).sum();
    let sd: i32 = ring.iter().filter(|&&d| dark(d)).map(|&d| -d - t).sum();
    sb.max(sd) as u32
}

fn describe(smoothed: &[u8], w: usize, u: usize, v: usize) -> Descriptor {
    let mut d = [0u64; 4];
    for (i, &(x1, y1, x2, y2)) in PATTERN.iter().enumerate() {
        let a = smoothed[(v as i32 + i32::from(y1)) as usize * w + (u as i32 + i32::from(x1)) as usize];
        let b = smoothed[(v as i32 + i32::from(y2)) as usize * w + (u as i32 + i32::from(x2)) as usize];
        if a < b {
            d[i / 64] |= 1 << (i % 64);
        }
    }
    d
}

struct Candidate {
    u: u32,
    v: u32,
    score: u32,
}

/// Depth of the center pixel in meters when the surrounding window is usable.
fn window_depth(depth: &DepthImage, mask: &Mask, u: u32, v: u32, p: &DetectorParams, scale: f64) -> Option<f64> {
    let r = p.window_radius;
    let (mut lo, mut hi) = (u16::MAX, 0u16);
    for y in v - r..=v + r {
        for x in u - r..=u + r {
            if mask.get(x, y) {
                return None;
            }
            let d = depth.get_pixel(x, y)[0];
            if d == 0 {
                return None;
            }
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let c = depth.get_pixel(u, v)[0];
    if f64::from(hi - lo) > p.max_depth_spread * f64::from(c) {
        return None;
    }
    Some(f64::from(c) / scale)
}

/// Corners outside `mask` with valid depth, spread over a grid, with descriptors.
pub fn detect_features(
    gray: &GrayImage,
    depth: &DepthImage,
    mask: &Mask,
    intr: &Intrinsics,
    target_count: usize,
    params: &DetectorParams,
) -> Result<Vec<FeaturePoint>> {
    let (w, h) = gray.dimensions();
    if depth.dimensions() != (w, h) || mask.dims() != (w, h) {
        return Err(Error::Shape(format!(
            "gray {w}x{h}, depth {:?}, mask {:?}",
            depth.dimensions(),
            mask.dims()
        )));
    }
    let b = params.border.max(params.window_radius).max(3);
    if w <= 2 * b || h <= 2 * b || target_count == 0 {
        return Ok(Vec::new());
    }
    let (wu, hu) = (w as usize, h as usize);
    let raw = gray.as_raw();
    let t = i32::from(params.fast_threshold);
    let scores: Vec<u32> = (0..hu)
        .into_par_iter()
        .flat_map_iter(|v| {
            (0..wu).map(move |u| {
                if u < b as usize || v < b as usize || u >= wu - b as usize || v >= hu - b as usize {
                    0
                } else {
                    fast_score(raw, wu, u, v, t)
                }
            })
        })
        .collect();

    let mut cands = Vec::new();
    for v in b..h - b {
        for u in b..w - b {
            let i = v as usize * wu + u as usize;
            let s = scores[i];
            if s == 0 {
                continue;
            }
            // 3x3 suppression; ties go to the first pixel in raster order.
            let mut keep = true;
            'nb: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let j = (i as i64 + dy * wu as i64 + dx) as usize;
                    let before = dy < 0 || (dy == 0 && dx < 0);
                    if scores[j] > s || (before && scores[j] == s) {
                        keep = false;
                        break 'nb;
                    }
                }
            }
            if keep {
                cands.push(Candidate { u, v, score: s });
            }
        }
    }

    let mut usable: Vec<(Candidate, f64)> = cands
        .into_iter()
        .filter_map(|c| window_depth(depth, mask, c.u, c.v, params, intr.depth_scale).map(|d| (c, d)))
        .collect();
    // Strongest first, raster order on ties.
    usable.sort_by(|a, b| b.0.score.cmp(&a.0.score).then((a.0.v, a.0.u).cmp(&(b.0.v, b.0.u))));

    let cells = (params.grid_cols * params.grid_rows) as usize;
    let quota = target_count.div_ceil(cells);
    let mut per_cell = vec![0usize; cells];
    let mut taken = vec![false; usable.len()];
    let mut chosen = Vec::new();
    for (k, (c, _)) in usable.iter().enumerate() {
        if chosen.len() >= target_count {
            break;
        }
        let cx = (c.u * params.grid_cols / w).min(params.grid_cols - 1);
        let cy = (c.v * params.grid_rows / h).min(params.grid_rows - 1);
        let cell = (cy * params.grid_cols + cx) as usize;
        if per_cell[cell] < quota {
            per_cell[cell] += 1;
            taken[k] = true;
            chosen.push(k);
        }
    }
    for k in 0..usable.len() {
        if chosen.len() >= target_count {
            break;
        }
        if !taken[k] {
            chosen.push(k);
        }
    }
    chosen.sort_unstable();

    let smoothed = smooth(gray);
    let sm = smoothed.as_raw();
    let mut out = Vec::with_capacity(chosen.len());
    for k in chosen {
        let (c, d) = &usable[k];
        let pixel = Vector2::new(f64::from(c.u), f64::from(c.v));
        let point_cam = backproject(pixel, *d, intr)?;
        out.push(FeaturePoint {
            pixel,
            point_cam,
            descriptor: describe(sm, wu, c.u as usize, c.v as usize),
            response: c.score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr(w: u32, h: u32) -> Intrinsics {
        Intrinsics {
            fx: 300.0,
            fy: 300.0,
            cx: f64::from(w) / 2.0,
            cy: f64::from(h) / 2.0,
            width: w,
            height: h,
            depth_scale: 5000.0,
        }
    }

    /// Blocks of pseudo-random intensity; block corners are FAST corners.
    fn checker(w: u32, h: u32, cell: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |u, v| {
            let k = (u / cell).wrapping_mul(73_856_093) ^ (v / cell).wrapping_mul(19_349_663);
            Luma([(k.wrapping_mul(2_654_435_761) >> 24) as u8])
        })
    }

    #[test]
    fn gray_weights() {
        let rgb = RgbImage::from_pixel(1, 1, image::Rgb([255, 255, 255]));
        assert_eq!(to_gray(&rgb).get_pixel(0, 0)[0], 255);
        let rgb = RgbImage::from_pixel(1, 1, image::Rgb([100, 0, 0]));
        assert_eq!(to_gray(&rgb).get_pixel(0, 0)[0], ((77 * 100) >> 8) as u8);
    }

    #[test]
    fn smooth_preserves_constant() {
        let g = GrayImage::from_pixel(9, 7, Luma([123]));
        assert_eq!(smooth(&g), g);
    }

    #[test]
    fn fast_detects_isolated_bright_dot() {
        // A single bright pixel on a dark background: all 16 ring pixels are darker.
        let mut g = GrayImage::from_pixel(9, 9, Luma([10]));
        g.put_pixel(4, 4, Luma([200]));
        assert!(fast_score(g.as_raw(), 9, 4, 4, 20) > 0);
        assert_eq!(fast_score(g.as_raw(), 9, 5, 4, 20), 0);
    }

    #[test]
    fn uniform_image_has_no_features() {
        let (w, h) = (96, 80);
        let g = GrayImage::from_pixel(w, h, Luma([128]));
        let d = DepthImage::from_pixel(w, h, Luma([5000]));
        let f = detect_features(&g, &d, &Mask::new(w, h), &intr(w, h), 100, &DetectorParams::default()).unwrap();
        assert!(f.is_empty());
    }

    #[test]
    fn masked_half_has_no_features() {
        let (w, h) = (160, 120);
        let g = checker(w, h, 10);
        let d = DepthImage::from_pixel(w, h, Luma([6000]));
        let i = intr(w, h);
        let p = DetectorParams::default();
        let all = detect_features(&g, &d, &Mask::new(w, h), &i, 1000, &p).unwrap();
        assert!(all.iter().any(|f| f.pixel.x < 80.0));
        let mask = Mask::from_fn(w, h, |u, _| u < 80);
        let half = detect_features(&g, &d, &mask, &i, 1000, &p).unwrap();
        assert!(!half.is_empty());
        for f in &half {
            assert!(f.pixel.x >= 80.0);
            assert!(!mask.get(f.pixel.x as u32, f.pixel.y as u32));
            assert!(f.point_cam.z > 0.0);
        }
    }

    #[test]
    fn invalid_depth_rejected() {
        let (w, h) = (160, 120);
        let g = checker(w, h, 10);
        let d = DepthImage::from_fn(w, h, |_, v| Luma([if v < 60 { 0 } else { 6000 }]));
        let f = detect_features(&g, &d, &Mask::new(w, h), &intr(w, h), 1000, &DetectorParams::default()).unwrap();
        assert!(!f.is_empty());
        assert!(f.iter().all(|f| f.pixel.y >= 62.0));
    }

    #[test]
    fn target_count_caps_output_and_is_deterministic() {
        let (w, h) = (320, 240);
        let g = checker(w, h, 7);
        let d = DepthImage::from_pixel(w, h, Luma([6000]));
        let i = intr(w, h);
        let p = DetectorParams::default();
        let a = detect_features(&g, &d, &Mask::new(w, h), &i, 50, &p).unwrap();
        assert_eq!(a.len(), 50);
        let b = detect_features(&g, &d, &Mask::new(w, h), &i, 50, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch() {
        let g = GrayImage::new(40, 40);
        let d = DepthImage::new(40, 30);
        assert!(detect_features(
            &g,
            &d,
            &Mask::new(40, 40),
            &intr(40, 40),
            10,
            &DetectorParams::default()
        )
        .is_err());
    }
}

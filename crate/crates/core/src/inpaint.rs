//! Fill masked regions of color and depth images by fast-marching propagation.
//!
//! Pixels are visited in increasing arrival time of a front that starts on the mask
//! boundary. Color takes a weighted, gradient-extrapolated average of the pixels
//! already known within a small radius; depth takes the 75th percentile of known valid
//! neighbours so that holes left by foreground objects fill with the farther surface.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::DepthImage;
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    pub enabled: bool,
    /// Insert the filled pixels into the map instead of leaving them out.
    pub insert_into_map: bool,
    pub color_radius: u32,
    pub depth_radius: u32,
    /// Where to write before/after image pairs, if anywhere.
    pub dump_dir: Option<std::path::PathBuf>,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            enabled: true,
            insert_into_map: false,
            color_radius: 5,
            depth_radius: 2,
            dump_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintResult {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    /// Masked pixels that received a valid depth.
    pub filled_pixel_count: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Flag {
    Known,
    Band,
    Inside,
}

#[derive(PartialEq)]
struct Item(f64, usize);
impl Eq for Item {}
impl Ord for Item {
    fn cmp(&self, o: &Self) -> Ordering {
        // Min-heap on arrival time, then index.
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}
impl PartialOrd for Item {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

const INF: f64 = 1e12;

fn solve(t: &[f64], flags: &[Flag], a: Option<usize>, b: Option<usize>) -> f64 {
    let val = |i: Option<usize>| match i {
        Some(i) if flags[i] != Flag::Inside => t[i],
        _ => INF,
    };
    let (ta, tb) = (val(a), val(b));
    if ta < INF && tb < INF {
        let d = ta - tb;
        if d.abs() < 1.0 {
            return (ta + tb + (2.0 - d * d).sqrt()) / 2.0;
        }
    }
    ta.min(tb) + 1.0
}

/// Visits pixels of `mask` in front order; `visit(idx, flags, times)` runs when a
/// pixel joins the front, with earlier pixels already marked non-`Inside`.
fn march(mask: &Mask, mut visit: impl FnMut(usize, &[Flag], &[f64])) {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let m = mask.as_slice();
    let mut flags: Vec<Flag> = m.iter().map(|&b| if b { Flag::Inside } else { Flag::Known }).collect();
    let mut t: Vec<f64> = m.iter().map(|&b| if b { INF } else { 0.0 }).collect();
    let nb4 = |i: usize| {
        let (u, v) = (i % w, i / w);
        [
            (u > 0).then(|| i - 1),
            (u + 1 < w).then(|| i + 1),
            (v > 0).then(|| i - w),
            (v + 1 < h).then(|| i + w),
        ]
    };
    let mut heap = BinaryHeap::new();
    for i in 0..w * h {
        if flags[i] == Flag::Known && nb4(i).iter().flatten().any(|&j| flags[j] == Flag::Inside) {
            flags[i] = Flag::Band;
            heap.push(Item(0.0, i));
        }
    }
    while let Some(Item(_, i)) = heap.pop() {
        flags[i] = Flag::Known;
        for j in nb4(i).into_iter().flatten() {
            if flags[j] != Flag::Inside {
                continue;
            }
            let [l, r, up, dn] = nb4(j);
            let tj = solve(&t, &flags, l, up)
                .min(solve(&t, &flags, r, up))
                .min(solve(&t, &flags, l, dn))
                .min(solve(&t, &flags, r, dn));
            t[j] = tj;
            visit(j, &flags, &t);
            flags[j] = Flag::Band;
            heap.push(Item(tj, j));
        }
    }
}

fn check(mask: &Mask, w: u32, h: u32) -> Result<()> {
    if mask.dims() != (w, h) {
        return Err(Error::Shape(format!("mask {:?} vs image {w}x{h}", mask.dims())));
    }
    Ok(())
}

pub fn inpaint_color(rgb: &RgbImage, mask: &Mask, radius: u32) -> Result<RgbImage> {
    let (w, h) = rgb.dimensions();
    check(mask, w, h)?;
    if mask.count() == mask.as_slice().len() {
        return Err(Error::AllMasked);
    }
    let (wu, hu) = (w as usize, h as usize);
    let mut img: Vec<[f64; 3]> = rgb.pixels().map(|p| p.0.map(f64::from)).collect();
    let r = radius.max(1) as i64;
    march(mask, |p, flags, t| {
        let (pu, pv) = ((p % wu) as i64, (p / wu) as i64);
        let known = |u: i64, v: i64| {
            (u >= 0 && v >= 0 && u < wu as i64 && v < hu as i64)
                .then(|| v as usize * wu + u as usize)
                .filter(|&i| flags[i] != Flag::Inside)
        };
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for dv in -r..=r {
            for du in -r..=r {
                let d2 = (du * du + dv * dv) as f64;
                if d2 == 0.0 || d2 > (r * r) as f64 {
                    continue;
                }
                let (qu, qv) = (pu + du, pv + dv);
                let Some(q) = known(qu, qv) else { continue };
                let dst = 1.0 / d2;
                let lev = 1.0 / (1.0 + (t[q] - t[p]).abs());
                let wgt = dst * lev;
                for c in 0..3 {
                    let grad = |a: Option<usize>, b: Option<usize>| match (a, b) {
                        (Some(a), Some(b)) => (img[a][c] - img[b][c]) / 2.0,
                        (Some(a), None) => img[a][c] - img[q][c],
                        (None, Some(b)) => img[q][c] - img[b][c],
                        (None, None) => 0.0,
                    };
                    let gx = grad(known(qu + 1, qv), known(qu - 1, qv));
                    let gy = grad(known(qu, qv + 1), known(qu, qv - 1));
                    // Extrapolate from q to p along the local gradient.
                    acc[c] += wgt * (img[q][c] + gx * (-du) as f64 + gy * (-dv) as f64);
                }
                wsum += wgt;
            }
        }
        if wsum > 0.0 {
            img[p] = acc.map(|a| (a / wsum).clamp(0.0, 255.0));
        }
    });
    let mut out = rgb.clone();
    for (i, px) in out.pixels_mut().enumerate() {
        if mask.as_slice()[i] {
            *px = Rgb(img[i].map(|c| c.round() as u8));
        }
    }
    Ok(out)
}

/// Returns the filled depth and the number of masked pixels given a valid value.
pub fn inpaint_depth(depth: &DepthImage, mask: &Mask, radius: u32) -> Result<(DepthImage, usize)> {
    let (w, h) = depth.dimensions();
    check(mask, w, h)?;
    let (wu, hu) = (w as usize, h as usize);
    let mut d: Vec<u16> = depth.as_raw().clone();
    for (i, &m) in mask.as_slice().iter().enumerate() {
        if m {
            d[i] = 0;
        }
    }
    let r = radius.max(1) as i64;
    let mut filled = 0usize;
    let mut vals = Vec::new();
    march(mask, |p, flags, _| {
        let (pu, pv) = ((p % wu) as i64, (p / wu) as i64);
        vals.clear();
        for dv in -r..=r {
            for du in -r..=r {
                let (qu, qv) = (pu + du, pv + dv);
                if (du == 0 && dv == 0) || qu < 0 || qv < 0 || qu >= wu as i64 || qv >= hu as i64 {
                    continue;
                }
                let q = qv as usize * wu + qu as usize;
                if flags[q] != Flag::Inside && d[q] != 0 {
                    vals.push(d[q]);
                }
            }
        }
        if !vals.is_empty() {
            vals.sort_unstable();
            let rank = ((vals.len() as f64 * 0.75).ceil() as usize).max(1) - 1;
            d[p] = vals[rank];
            filled += 1;
        }
    });
    let out = DepthImage::from_raw(w, h, d).expect("buffer size matches");
    Ok((out, filled))
}

pub fn inpaint(rgb: &RgbImage, depth: &DepthImage, mask: &Mask, cfg: &InpaintConfig) -> Result<InpaintResult> {
    let rgb = inpaint_color(rgb, mask, cfg.color_radius)?;
    let (depth, filled_pixel_count) = inpaint_depth(depth, mask, cfg.depth_radius)?;
    Ok(InpaintResult {
        rgb,
        depth,
        filled_pixel_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    fn hole(w: u32, h: u32, u0: u32, v0: u32, side: u32) -> Mask {
        Mask::from_fn(w, h, |u, v| u >= u0 && u < u0 + side && v >= v0 && v < v0 + side)
    }

    #[test]
    fn empty_mask_is_identity() {
        let rgb = RgbImage::from_fn(20, 10, |u, v| Rgb([u as u8, v as u8, 7]));
        let out = inpaint_color(&rgb, &Mask::new(20, 10), 5).unwrap();
        assert_eq!(out, rgb);
    }

    #[test]
    fn uniform_color_fills_exactly() {
        let rgb = RgbImage::from_pixel(40, 30, Rgb([12, 200, 99]));
        let mut holed = rgb.clone();
        let m = hole(40, 30, 10, 8, 12);
        for v in 8..20 {
            for u in 10..22 {
                holed.put_pixel(u, v, Rgb([0, 0, 0]));
            }
        }
        assert_eq!(inpaint_color(&holed, &m, 5).unwrap(), rgb);
    }

    #[test]
    fn horizontal_ramp_within_ten_levels() {
        let (w, h) = (80, 60);
        let ramp = |u: u32| 20.0 + 2.5 * f64::from(u);
        let rgb = RgbImage::from_fn(w, h, |u, _| {
            let g = ramp(u).round() as u8;
            Rgb([g, g, g])
        });
        let m = hole(w, h, 30, 20, 20);
        let mut holed = rgb.clone();
        for (i, px) in holed.pixels_mut().enumerate() {
            if m.as_slice()[i] {
                *px = Rgb([255, 0, 0]);
            }
        }
        let out = inpaint_color(&holed, &m, 5).unwrap();
        for v in 20..40 {
            for u in 30..50 {
                let got = f64::from(out.get_pixel(u, v)[0]);
                assert!((got - ramp(u)).abs() <= 10.0, "({u},{v}) {got} vs {}", ramp(u));
            }
        }
    }

    #[test]
    fn outside_mask_bit_identical_and_idempotent() {
        let (w, h) = (50, 40);
        let rgb = RgbImage::from_fn(w, h, |u, v| Rgb([(u * 5) as u8, (v * 6) as u8, ((u * v) % 256) as u8]));
        let m = Mask::from_fn(w, h, |u, v| (u as i32 - 25).pow(2) + (v as i32 - 20).pow(2) < 80);
        let once = inpaint_color(&rgb, &m, 5).unwrap();
        for v in 0..h {
            for u in 0..w {
                if !m.get(u, v) {
                    assert_eq!(once.get_pixel(u, v), rgb.get_pixel(u, v));
                }
            }
        }
        let twice = inpaint_color(&once, &m, 5).unwrap();
        for (a, b) in once.pixels().zip(twice.pixels()) {
            for c in 0..3 {
                assert!((i32::from(a[c]) - i32::from(b[c])).abs() <= 1);
            }
        }
    }

    #[test]
    fn all_masked_is_error() {
        let rgb = RgbImage::new(4, 4);
        let m = Mask::from_fn(4, 4, |_, _| true);
        assert!(matches!(inpaint_color(&rgb, &m, 5), Err(Error::AllMasked)));
        assert!(matches!(inpaint_color(&rgb, &Mask::new(5, 4), 5), Err(Error::Shape(_))));
    }

    #[test]
    fn depth_wall_hole() {
        let d = DepthImage::from_pixel(30, 30, Luma([10000]));
        let m = hole(30, 30, 10, 10, 8);
        let mut holed = d.clone();
        for v in 10..18 {
            for u in 10..18 {
                holed.put_pixel(u, v, Luma([0]));
            }
        }
        let (out, n) = inpaint_depth(&holed, &m, 2).unwrap();
        assert_eq!(out, d);
        assert_eq!(n, 64);
    }

    #[test]
    fn depth_prefers_far_side() {
        // Foreground 1 m on the left, background 3 m on the right; hole straddles both.
        let (w, h) = (60, 40);
        let d = DepthImage::from_fn(w, h, |u, _| Luma([if u < 30 { 5000 } else { 15000 }]));
        let m = hole(w, h, 20, 10, 20);
        let (out, n) = inpaint_depth(&d, &m, 2).unwrap();
        assert_eq!(n, 400);
        let far = (0..w)
            .flat_map(|u| (0..h).map(move |v| (u, v)))
            .filter(|&(u, v)| m.get(u, v) && out.get_pixel(u, v)[0] == 15000)
            .count();
        assert!(far * 2 >= n, "{far} of {n} far");
    }

    #[test]
    fn invalid_boundary_leaves_zeros() {
        let d = DepthImage::new(20, 20);
        let (out, n) = inpaint_depth(&d, &hole(20, 20, 5, 5, 6), 2).unwrap();
        assert_eq!(n, 0);
        assert!(out.as_raw().iter().all(|&x| x == 0));
    }
}

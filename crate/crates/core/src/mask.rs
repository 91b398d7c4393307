//! Full-frame binary masks and their run-length text encoding.

use crate::error::{Error, Result};

/// Row-major binary bitmap, `true` = set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

/// Pixel box `[u_min, u_max) x [v_min, v_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub u_min: u32,
    pub v_min: u32,
    pub u_max: u32,
    pub v_max: u32,
}

impl BBox {
    /// Floating-point pixel center of the box.
    pub fn center(&self) -> (f64, f64) {
        (
            (f64::from(self.u_min) + f64::from(self.u_max) - 1.0) / 2.0,
            (f64::from(self.v_min) + f64::from(self.v_max) - 1.0) / 2.0,
        )
    }

    pub fn is_valid_for(&self, width: u32, height: u32) -> bool {
        self.u_min < self.u_max && self.u_max <= width && self.v_min < self.v_max && self.v_max <= height
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Mask { width, height, data }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "mask data has {} pixels, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.data[v as usize * self.width as usize + u as usize]
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32, value: bool) {
        let w = self.width as usize;
        self.data[v as usize * w + u as usize] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn union_with(&mut self, other: &Mask) -> Result<()> {
        self.check_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &Mask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count())
    }

    /// Pixelwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Tight bounding box of the set pixels.
    pub fn bbox(&self) -> Option<BBox> {
        let (mut u0, mut v0, mut u1, mut v1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v) {
                    any = true;
                    u0 = u0.min(u);
                    v0 = v0.min(v);
                    u1 = u1.max(u + 1);
                    v1 = v1.max(v + 1);
                }
            }
        }
        any.then_some(BBox {
            u_min: u0,
            v_min: v0,
            u_max: u1,
            v_max: v1,
        })
    }

    /// Morphological dilation (`radius > 0`) or erosion (`radius < 0`) with a disk.
    pub fn morph(&self, radius: i32) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius.abs();
        let offsets: Vec<(i32, i32)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let dilate = radius > 0;
        let (w, h) = (self.width as i32, self.height as i32);
        Mask::from_fn(self.width, self.height, |u, v| {
            let hit = |&(dx, dy): &(i32, i32)| {
                let (x, y) = (u as i32 + dx, v as i32 + dy);
                if x < 0 || y < 0 || x >= w || y >= h {
                    // Outside the frame counts as unset.
                    false
                } else {
                    self.get(x as u32, y as u32)
                }
            };
            if dilate {
                offsets.iter().any(hit)
            } else {
                offsets.iter().all(hit)
            }
        })
    }

    /// Alternating run lengths, starting with a (possibly empty) run of unset pixels.
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0usize;
        for &b in &self.data {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(width: u32, height: u32, runs: &[usize]) -> Result<Self> {
        let total: usize = runs.iter().sum();
        let expected = width as usize * height as usize;
        if total != expected {
            return Err(Error::Shape(format!("run lengths sum to {total}, expected {expected}")));
        }
        let mut data = Vec::with_capacity(expected);
        let mut value = false;
        for &r in runs {
            data.extend(std::iter::repeat_n(value, r));
            value = !value;
        }
        Ok(Mask { width, height, data })
    }

    /// Run-length encoding as a single space-separated line.
    pub fn to_rle_line(&self) -> String {
        let runs = self.to_runs();
        let mut s = String::with_capacity(runs.len() * 4);
        for (i, r) in runs.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(&r.to_string());
        }
        s
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_dims(b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

//! Absolute trajectory error after rigid alignment, and top-down SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::{associate_timestamps, Trajectory};
use crate::error::{Error, Result};
use crate::geom::{align_closed_form, Pose};
use crate::Point3;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ate_rmse: f64,
    pub ate_mean: f64,
    pub ate_median: f64,
    pub ate_max: f64,
    pub pair_count: usize,
    /// `(estimate timestamp, error in meters)`
    pub per_pair: Vec<(f64, f64)>,
    /// Maps estimated positions onto ground truth.
    pub alignment: Pose<f64>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!(
            "pairs {}\nate_rmse {:.6}\nate_mean {:.6}\nate_median {:.6}\nate_max {:.6}\n",
            self.pair_count, self.ate_rmse, self.ate_mean, self.ate_median, self.ate_max
        )
    }

    /// `timestamp,error` per associated pair.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("timestamp,error\n");
        for (t, e) in &self.per_pair {
            let _ = writeln!(s, "{t:.6},{e:.9}");
        }
        s
    }
}

fn associated(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> (Vec<f64>, Vec<Point3>, Vec<Point3>) {
    let pairs = associate_timestamps(&est.timestamps(), &gt.timestamps(), max_dt);
    let e = est.entries();
    let g = gt.entries();
    let ts = pairs.iter().map(|&(i, _)| e[i].0).collect();
    let ep = pairs.iter().map(|&(i, _)| Point3::from(e[i].1.translation)).collect();
    let gp = pairs.iter().map(|&(_, j)| Point3::from(g[j].1.translation)).collect();
    (ts, ep, gp)
}

/// ATE of `est` against `gt` after timestamp association and SE(3) alignment.
///
/// Collinear or coincident trajectories still align: any minimizer of the residual is
/// used, which leaves the per-pair errors well defined.
pub fn compute_ate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<EvalReport> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::Precondition("empty trajectory".into()));
    }
    let (ts, ep, gp) = associated(est, gt, max_dt);
    if ep.len() < 3 {
        return Err(Error::InsufficientOverlap(ep.len()));
    }
    let align = align_closed_form(&ep, &gp).ok_or(Error::Numerical("alignment SVD did not converge"))?;
    let errs: Vec<f64> = ep
        .iter()
        .zip(&gp)
        .map(|(e, g)| (g - align.transform(e)).norm())
        .collect();
    let n = errs.len() as f64;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let mean = errs.iter().sum::<f64>() / n;
    let mut sorted = errs.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
    };
    Ok(EvalReport {
        ate_rmse: rmse,
        ate_mean: mean,
        ate_median: median,
        ate_max: sorted[m - 1],
        pair_count: m,
        per_pair: ts.into_iter().zip(errs).collect(),
        alignment: align,
    })
}

const SIZE: f64 = 800.0;
const MARGIN: f64 = 50.0;

/// Top-down (x–y) SVG of ground truth and the aligned estimate.
pub fn render_plot(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<String> {
    if est.is_empty() || gt.is_empty() {
        return Err(Error::Precondition("cannot plot an empty trajectory".into()));
    }
    let align = compute_ate(est, gt, max_dt)
        .map(|r| r.alignment)
        .unwrap_or_else(|_| Pose::identity());
    let gxy: Vec<(f64, f64)> = gt
        .entries()
        .iter()
        .map(|(_, p)| (p.translation.x, p.translation.y))
        .collect();
    let exy: Vec<(f64, f64)> = est
        .entries()
        .iter()
        .map(|(_, p)| {
            let q = align.transform(&Point3::from(p.translation));
            (q.x, q.y)
        })
        .collect();
    let all = gxy.iter().chain(&exy);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-6);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let map = |(x, y): (f64, f64)| (SIZE / 2.0 + (x - cx) * scale, SIZE / 2.0 - (y - cy) * scale);
    let points = |xy: &[(f64, f64)]| {
        xy.iter()
            .map(|&p| {
                let (u, v) = map(p);
                format!("{u:.3},{v:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<polyline id="groundtruth" fill="none" stroke="grey" stroke-width="2" stroke-dasharray="6,4" points="{}"/>"#,
        points(&gxy)
    );
    let _ = writeln!(
        s,
        r#"<polyline id="estimate" fill="none" stroke="blue" stroke-width="2" points="{}"/>"#,
        points(&exy)
    );
    for (id, xy, color) in [
        ("groundtruth-start", gxy[0], "grey"),
        ("estimate-start", exy[0], "blue"),
    ] {
        let (u, v) = map(xy);
        let _ = writeln!(s, r#"<circle id="{id}" cx="{u:.3}" cy="{v:.3}" r="5" fill="{color}"/>"#);
    }
    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="14">"#);
    let _ = writeln!(
        s,
        r#"<line x1="20" y1="20" x2="50" y2="20" stroke="grey" stroke-width="2" stroke-dasharray="6,4"/>"#
    );
    let _ = writeln!(s, r#"<text x="58" y="25">ground truth</text>"#);
    let _ = writeln!(
        s,
        r#"<line x1="20" y1="42" x2="50" y2="42" stroke="blue" stroke-width="2"/>"#
    );
    let _ = writeln!(s, r#"<text x="58" y="47">estimate</text>"#);
    let _ = writeln!(s, "</g>\n</svg>");
    Ok(s)
}

pub fn emit_plot(est: &Trajectory, gt: &Trajectory, max_dt: f64, path: &Path) -> Result<()> {
    let svg = render_plot(est, gt, max_dt)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

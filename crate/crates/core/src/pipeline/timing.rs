use std::fmt::Write as _;
use std::time::{Duration, Instant};

pub const STAGES: [&str; 6] = ["load", "track", "odometry", "inpaint", "map", "log"];
pub(super) const LOAD: usize = 0;
pub(super) const TRACK: usize = 1;
pub(super) const ODOMETRY: usize = 2;
pub(super) const INPAINT: usize = 3;
pub(super) const MAP: usize = 4;
pub(super) const LOG: usize = 5;

/// Per-frame milliseconds spent in each of [`STAGES`].
pub type StageTimes = [f64; STAGES.len()];

/// Monotonic time source.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

pub(super) fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub name: &'static str,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingReport {
    pub frames: usize,
    pub stages: Vec<StageTiming>,
    /// Wall time of the frame loop.
    pub end_to_end_ms: f64,
    pub fps: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

impl TimingReport {
    pub fn from_samples(samples: &[StageTimes], end_to_end_ms: f64) -> Self {
        let stages = STAGES
            .iter()
            .enumerate()
            .map(|(i, &name)| {
                let mut v: Vec<f64> = samples.iter().map(|s| s[i]).collect();
                v.sort_by(f64::total_cmp);
                let total: f64 = v.iter().sum();
                StageTiming {
                    name,
                    mean_ms: if v.is_empty() { 0.0 } else { total / v.len() as f64 },
                    median_ms: median(&v),
                    p95_ms: percentile(&v, 0.95),
                    total_ms: total,
                }
            })
            .collect();
        let fps = if samples.is_empty() {
            0.0
        } else {
            samples.len() as f64 / (end_to_end_ms / 1000.0)
        };
        TimingReport {
            frames: samples.len(),
            stages,
            end_to_end_ms,
            fps,
        }
    }

    pub fn stage_sum_ms(&self) -> f64 {
        self.stages.iter().map(|s| s.total_ms).sum()
    }

    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames {}", self.frames);
        let _ = writeln!(s, "end_to_end_ms {:.3}", self.end_to_end_ms);
        let _ = writeln!(s, "stage_sum_ms {:.3}", self.stage_sum_ms());
        let _ = writeln!(s, "fps {:.3}", self.fps);
        let _ = writeln!(s, "stage mean_ms median_ms p95_ms total_ms");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{} {:.3} {:.3} {:.3} {:.3}",
                st.name, st.mean_ms, st.median_ms, st.p95_ms, st.total_ms
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn statistics_by_hand() {
        let samples: Vec<StageTimes> = (1..=20).map(|i| [f64::from(i), 1.0, 0.0, 0.0, 0.0, 0.0]).collect();
        let r = TimingReport::from_samples(&samples, 250.0);
        let load = r.stage("load").unwrap();
        assert_eq!(load.mean_ms, 10.5);
        assert_eq!(load.median_ms, 10.5);
        assert_eq!(load.p95_ms, 19.0);
        assert_eq!(load.total_ms, 210.0);
        assert_eq!(r.stage_sum_ms(), 230.0);
        assert_eq!(r.fps, 80.0);
        assert!(r.to_text().contains("\nload 10.500 10.500 19.000 210.000\n"));
    }

    #[test]
    fn empty_report() {
        let r = TimingReport::from_samples(&[], 0.0);
        assert_eq!((r.frames, r.fps), (0, 0.0));
    }
}

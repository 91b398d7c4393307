//! Seeded degradation of detection streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Perturbation {
    /// Probability of removing a whole instance.
    pub dropout: f64,
    /// Disk radius; positive dilates, negative erodes.
    pub radius: i32,
    /// Uniform score noise in `[-jitter, jitter]`, clamped to `[0, 1]`.
    pub score_jitter: f64,
}

/// Applies `p` to one frame's detections; the outcome depends only on `seed` and
/// `frame`.
pub fn perturb_detections(dets: &[Detection], p: &Perturbation, seed: u64, frame: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    let mut out = Vec::with_capacity(dets.len());
    for d in dets {
        // Draw both numbers per instance so the stream does not depend on outcomes.
        let drop_draw: f64 = rng.random();
        let jitter_draw: f64 = rng.random_range(-1.0..=1.0);
        if p.dropout > 0.0 && drop_draw < p.dropout {
            continue;
        }
        let mut d = d.clone();
        if p.radius != 0 {
            d.mask = d.mask.morph(p.radius);
            match d.mask.bbox() {
                Some(b) => d.bbox = b,
                None => continue,
            }
        }
        if p.score_jitter > 0.0 {
            d.score = (d.score + jitter_draw * p.score_jitter).clamp(0.0, 1.0);
        }
        out.push(d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;

    fn dets() -> Vec<Detection> {
        (0..4)
            .map(|i| {
                let mask = Mask::from_fn(40, 30, |u, v| u >= 5 + i * 8 && u < 10 + i * 8 && (5..15).contains(&v));
                Detection {
                    class_id: 0,
                    class_name: "person".into(),
                    score: 0.95,
                    bbox: mask.bbox().unwrap(),
                    mask,
                }
            })
            .collect()
    }

    #[test]
    fn zero_perturbation_is_identity() {
        assert_eq!(perturb_detections(&dets(), &Perturbation::default(), 3, 7), dets());
    }

    #[test]
    fn full_dropout_is_empty() {
        let p = Perturbation {
            dropout: 1.0,
            ..Perturbation::default()
        };
        for f in 0..20 {
            assert!(perturb_detections(&dets(), &p, 3, f).is_empty());
        }
    }

    #[test]
    fn dilation_grows_masks() {
        let p = Perturbation {
            radius: 2,
            ..Perturbation::default()
        };
        let out = perturb_detections(&dets(), &p, 0, 0);
        for (a, b) in dets().iter().zip(&out) {
            assert!(b.mask.count() >= a.mask.count());
            assert!(a.mask.is_subset_of(&b.mask));
            assert_eq!(Some(b.bbox), b.mask.bbox());
        }
    }

    #[test]
    fn deterministic_and_frame_dependent() {
        let p = Perturbation {
            dropout: 0.5,
            radius: 0,
            score_jitter: 0.1,
        };
        let a = perturb_detections(&dets(), &p, 9, 4);
        assert_eq!(a, perturb_detections(&dets(), &p, 9, 4));
        let differs = (0..20).any(|f| perturb_detections(&dets(), &p, 9, f) != a);
        assert!(differs);
        for d in &a {
            assert!((0.0..=1.0).contains(&d.score));
        }
    }
}

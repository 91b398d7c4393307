//! Brute-force Hamming matching with ratio test and mutual check.

use super::features::{Descriptor, FeaturePoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Correspondence {
    /// Index into the first list.
    pub a: usize,
    /// Index into the second list.
    pub b: usize,
    pub distance: u32,
}

#[inline]
pub fn hamming(x: &Descriptor, y: &Descriptor) -> u32 {
    x.iter().zip(y).map(|(a, b)| (a ^ b).count_ones()).sum()
}

/// Best and second-best distance; a missing second counts as 257 (worse than any).
fn two_nearest(q: &Descriptor, pool: &[FeaturePoint]) -> Option<(usize, u32, u32)> {
    let mut best: Option<(usize, u32)> = None;
    let mut second = 257;
    for (j, f) in pool.iter().enumerate() {
        let d = hamming(q, &f.descriptor);
        match best {
            Some((_, bd)) if d >= bd => second = second.min(d),
            Some((_, bd)) => {
                second = bd;
                best = Some((j, d));
            }
            None => best = Some((j, d)),
        }
    }
    best.map(|(j, d)| (j, d, second))
}

/// Nearest neighbours from `a` into `b` passing `best < ratio * second` whose reverse
/// nearest neighbour is the same feature. Sorted by `a`.
pub fn match_features(a: &[FeaturePoint], b: &[FeaturePoint], ratio: f64) -> Vec<Correspondence> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let back: Vec<Option<usize>> = b
        .iter()
        .map(|f| two_nearest(&f.descriptor, a).map(|(i, _, _)| i))
        .collect();
    let mut out = Vec::new();
    for (i, f) in a.iter().enumerate() {
        let Some((j, d, second)) = two_nearest(&f.descriptor, b) else {
            continue;
        };
        if f64::from(d) >= ratio * f64::from(second) {
            continue;
        }
        if back[j] == Some(i) {
            out.push(Correspondence {
                a: i,
                b: j,
                distance: d,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Point3;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fp(d: Descriptor) -> FeaturePoint {
        FeaturePoint {
            pixel: Vector2::zeros(),
            point_cam: Point3::new(0.0, 0.0, 1.0),
            descriptor: d,
            response: 1,
        }
    }

    fn random_desc(rng: &mut ChaCha8Rng) -> Descriptor {
        [rng.random(), rng.random(), rng.random(), rng.random()]
    }

    #[test]
    fn hamming_basics() {
        assert_eq!(hamming(&[0; 4], &[0; 4]), 0);
        assert_eq!(hamming(&[0; 4], &[u64::MAX; 4]), 256);
        assert_eq!(hamming(&[1, 0, 0, 0], &[0, 0, 0, 1 << 63]), 2);
    }

    #[test]
    fn self_match_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<FeaturePoint> = (0..100).map(|_| fp(random_desc(&mut rng))).collect();
        let m = match_features(&a, &a, 0.8);
        assert_eq!(m.len(), 100);
        assert!(m.iter().all(|c| c.a == c.b && c.distance == 0));
    }

    #[test]
    fn equidistant_candidates_rejected() {
        // Each b descriptor differs from the query in a disjoint set of 8 bits.
        let a = vec![fp([0; 4])];
        let b: Vec<FeaturePoint> = (0..4)
            .map(|k| {
                fp({
                    let mut d = [0u64; 4];
                    d[k] = 0xff;
                    d
                })
            })
            .collect();
        assert!(match_features(&a, &b, 0.8).is_empty());
    }

    #[test]
    fn planted_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let a: Vec<FeaturePoint> = (0..n).map(|_| fp(random_desc(&mut rng))).collect();
        // b is a permutation of a with up to 20 flipped bits; 20% replaced by noise.
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut truth = vec![None; n];
        let b: Vec<FeaturePoint> = perm
            .iter()
            .enumerate()
            .map(|(j, &i)| {
                if rng.random_bool(0.2) {
                    fp(random_desc(&mut rng))
                } else {
                    truth[i] = Some(j);
                    let mut d = a[i].descriptor;
                    for _ in 0..rng.random_range(0..20) {
                        let bit = rng.random_range(0..256);
                        d[bit / 64] ^= 1 << (bit % 64);
                    }
                    fp(d)
                }
            })
            .collect();
        let m = match_features(&a, &b, 0.8);
        let correct = m.iter().filter(|c| truth[c.a] == Some(c.b)).count();
        assert!(m.len() > 100);
        assert!(correct as f64 >= 0.99 * m.len() as f64, "{correct}/{}", m.len());
    }
}

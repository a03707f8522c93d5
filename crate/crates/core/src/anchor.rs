//! Depth-gradient anchors and anchor-weighted ray sampling.
//!
//! Anchors are local maxima of `|grad D|` picked greedily with non-maximum
//! suppression. Each anchor gets probability `exp(-beta |grad D|)`,
//! normalized over the set; a negative `beta` favours strong edges instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, Ray};
use crate::error::{argument, Result};
use crate::image::{ImageBuffer, ImageKind};

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_SUPPRESSION_RADIUS: f64 = 5.0;

/// Per-pixel `sqrt(Dx^2 + Dy^2)`: central differences inside, one-sided at borders.
pub fn depth_gradient(depth: &ImageBuffer) -> Result<ImageBuffer> {
    if depth.channels != 1 {
        return Err(argument("depth gradient needs a single-channel image"));
    }
    let (w, h) = (depth.width, depth.height);
    if w < 3 || h < 3 {
        return Err(argument(format!("depth image {w}x{h} smaller than 3x3")));
    }
    let d = |r: usize, c: usize| depth.get(r, c, 0);
    let mut out = ImageBuffer::new(w, h, 1, ImageKind::Depth);
    for r in 0..h {
        for c in 0..w {
            let dx = if c == 0 {
                d(r, 1) - d(r, 0)
            } else if c == w - 1 {
                d(r, w - 1) - d(r, w - 2)
            } else {
                (d(r, c + 1) - d(r, c - 1)) * 0.5
            };
            let dy = if r == 0 {
                d(1, c) - d(0, c)
            } else if r == h - 1 {
                d(h - 1, c) - d(h - 2, c)
            } else {
                (d(r + 1, c) - d(r - 1, c)) * 0.5
            };
            out.set(r, c, 0, dx.hypot(dy));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub row: usize,
    pub col: usize,
    pub grad: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Sorted by descending gradient, ties by (row, col).
    pub anchors: Vec<Anchor>,
    pub beta: f64,
    pub k: usize,
    pub suppression_radius: f64,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn to_json_string(&self, seed: u64) -> String {
        let file = AnchorFile { anchors: self.anchors.clone(), beta: self.beta, seed };
        let mut s = serde_json::to_string_pretty(&file).expect("anchors serialize");
        s.push('\n');
        s
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorFile {
    pub anchors: Vec<Anchor>,
    pub beta: f64,
    pub seed: u64,
}

/// Picks up to `k` local maxima of `grad` and assigns softmin probabilities.
pub fn select_anchors(grad: &ImageBuffer, k: usize, suppression_radius: f64, beta: f64) -> Result<AnchorSet> {
    if k == 0 {
        return Err(argument("k must be at least 1"));
    }
    if !(suppression_radius >= 0.0) {
        return Err(argument("suppression radius must be non-negative"));
    }
    if grad.channels != 1 {
        return Err(argument("gradient image must be single-channel"));
    }
    let (w, h) = (grad.width, grad.height);
    let g = |r: usize, c: usize| grad.get(r, c, 0);
    let mut candidates = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = g(r, c);
            let is_max = (r.saturating_sub(1)..=(r + 1).min(h - 1))
                .flat_map(|rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).map(move |cc| (rr, cc)))
                .all(|(rr, cc)| g(rr, cc) <= v);
            if is_max {
                candidates.push((v, r, c));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let r2 = suppression_radius * suppression_radius;
    let mut picked: Vec<(f64, usize, usize)> = Vec::with_capacity(k);
    for cand in candidates {
        if picked.len() == k {
            break;
        }
        let clear = picked.iter().all(|p| {
            let dr = p.1 as f64 - cand.1 as f64;
            let dc = p.2 as f64 - cand.2 as f64;
            dr * dr + dc * dc >= r2
        });
        if clear {
            picked.push(cand);
        }
    }
    let probs = softmin(&picked.iter().map(|p| p.0).collect::<Vec<_>>(), beta);
    let anchors = picked
        .into_iter()
        .zip(probs)
        .map(|((grad, row, col), prob)| Anchor { row, col, grad, prob })
        .collect();
    Ok(AnchorSet { anchors, beta, k, suppression_radius })
}

/// `exp(-beta x_j) / sum_m exp(-beta x_m)`, shifted for stability.
fn softmin(values: &[f64], beta: f64) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let logits: Vec<f64> = values.iter().map(|v| -beta * v).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|x| x / sum).collect()
}

/// Draws `n` anchor indices i.i.d. by inverse CDF over the stored order.
pub fn sample_anchor_indices(anchors: &AnchorSet, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(anchors.len());
    let mut acc = 0.0;
    for a in &anchors.anchors {
        acc += a.prob;
        cdf.push(acc);
    }
    let last = anchors.len().saturating_sub(1);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cdf.partition_point(|&c| c <= u).min(last)
        })
        .collect()
}

/// `n` camera rays through anchor pixel centers, deterministic for `seed`.
pub fn sample_anchor_rays(anchors: &AnchorSet, cam: &Camera, n: usize, seed: u64) -> Result<Vec<Ray>> {
    if n == 0 {
        return Err(argument("n must be at least 1"));
    }
    if anchors.is_empty() {
        return Err(argument("anchor set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_anchor_indices(anchors, n, &mut rng)
        .into_iter()
        .map(|j| {
            let a = &anchors.anchors[j];
            cam.pixel_ray(a.row, a.col)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ImageBuffer {
        let mut img = ImageBuffer::new(w, h, 1, ImageKind::Depth);
        for r in 0..h {
            for c in 0..w {
                img.set(r, c, 0, f(r, c));
            }
        }
        img
    }

    #[test]
    fn gradient_of_constant_and_ramp() {
        let g = depth_gradient(&image(6, 5, |_, _| 3.0)).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
        let g = depth_gradient(&image(6, 5, |_, c| c as f64)).unwrap();
        for r in 1..4 {
            for c in 1..5 {
                assert_eq!(g.get(r, c, 0), 1.0);
            }
        }
    }

    #[test]
    fn gradient_of_step() {
        let g = depth_gradient(&image(8, 5, |_, c| if c >= 4 { 2.0 } else { 0.0 })).unwrap();
        for r in 0..5 {
            assert_eq!(g.get(r, 3, 0), 1.0);
            assert_eq!(g.get(r, 4, 0), 1.0);
            assert_eq!(g.get(r, 2, 0), 0.0);
            assert_eq!(g.get(r, 5, 0), 0.0);
        }
    }

    #[test]
    fn gradient_rejects_tiny_images() {
        assert!(depth_gradient(&image(2, 5, |_, _| 0.0)).is_err());
    }

    #[test]
    fn two_anchor_softmin() {
        let grad = image(9, 1, |_, c| match c {
            1 => 1.0,
            7 => 0.0,
            _ => -1.0,
        });
        // -1 background keeps only the two marked pixels as maxima after suppression
        let set = select_anchors(&grad, 2, 3.0, 1.0).unwrap();
        assert_eq!(set.anchors.len(), 2);
        assert_eq!((set.anchors[0].col, set.anchors[1].col), (1, 7));
        let e = (-1.0f64).exp();
        assert!((set.anchors[0].prob - e / (1.0 + e)).abs() < 1e-15);
        assert!((set.anchors[1].prob - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((set.anchors[1].prob - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_uses_tie_break_order() {
        let set = select_anchors(&image(10, 10, |_, _| 0.0), 4, 3.0, 2.0).unwrap();
        let pix: Vec<_> = set.anchors.iter().map(|a| (a.row, a.col)).collect();
        assert_eq!(pix, vec![(0, 0), (0, 3), (0, 6), (0, 9)]);
        assert!(set.anchors.iter().all(|a| (a.prob - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_anchor_and_k_zero() {
        let set = select_anchors(&image(5, 5, |r, c| if (r, c) == (2, 2) { 1.0 } else { 0.0 }), 1, 0.0, 3.0).unwrap();
        assert_eq!(set.anchors[0].prob, 1.0);
        assert!(select_anchors(&image(5, 5, |_, _| 0.0), 0, 1.0, 1.0).is_err());
    }

    #[test]
    fn single_anchor_rays_repeat() {
        let set = select_anchors(&image(5, 5, |r, c| if (r, c) == (1, 3) { 1.0 } else { 0.0 }), 1, 0.0, 1.0).unwrap();
        let cam = Camera::look_at(crate::Vec3::new(0.0, 0.0, 3.0), crate::Vec3::zeros(), crate::Vec3::y(), 1.0, 5, 5);
        let rays = sample_anchor_rays(&set, &cam, 5, 1).unwrap();
        assert_eq!(rays.len(), 5);
        assert!(rays.iter().all(|r| *r == cam.pixel_ray(1, 3)));
    }
}

//! Synthetic stick-figure hands for desk-scale training.
//!
//! Keypoint order: 0 is the wrist, then four joints per finger from the
//! thumb to the little finger, base to tip.
//!
//! Channels: 0 holds a Gaussian blob per joint, 1 the bones, 2 the joint
//! blobs scaled by finger index. Every channel is `max(signal, noise)` with
//! background noise below [`NOISE_AMPLITUDE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

use crate::blocks::KEYPOINTS;
use crate::error::{Error, Result};
use crate::metrics::{KeypointSet, Sample};
use crate::tensor::{Float, Shape, Tensor};

pub const NOISE_AMPLITUDE: f64 = 0.05;
pub const MIN_IMAGE_SIZE: usize = 16;
const MAX_ATTEMPTS: usize = 10_000;

/// Phalanx lengths as fractions of the image side, base to tip.
const PHALANGES: [f64; 3] = [0.13, 0.10, 0.09];
const PALM: f64 = 0.22;
const KNUCKLE_SPACING: f64 = 0.1;

fn pose<R: Rng>(rng: &mut R, size: f64) -> Vec<[f64; 2]> {
    let wrist = [
        rng.random_range(0.35..0.65) * size,
        rng.random_range(0.55..0.8) * size,
    ];
    let heading = -PI / 2.0 + rng.random_range(-0.6..0.6);
    let (fwd, side) = ([heading.cos(), heading.sin()], [-heading.sin(), heading.cos()]);
    let mut pts = vec![wrist];
    for f in 0..5 {
        let (base, mut angle) = if f == 0 {
            let a = heading - 1.0 + rng.random_range(-0.15..0.15);
            let l = 0.6 * PALM * size;
            ([wrist[0] + l * a.cos(), wrist[1] + l * a.sin()], heading - 0.7)
        } else {
            let off = (f as f64 - 2.5) * KNUCKLE_SPACING * size;
            let l = PALM * size * rng.random_range(0.95..1.05);
            (
                [wrist[0] + l * fwd[0] + off * side[0], wrist[1] + l * fwd[1] + off * side[1]],
                heading + (f as f64 - 2.5) * 0.15,
            )
        };
        pts.push(base);
        let mut p = base;
        for len in PHALANGES {
            angle += rng.random_range(-0.3..0.3);
            let l = len * size * rng.random_range(0.9..1.1);
            p = [p[0] + l * angle.cos(), p[1] + l * angle.sin()];
            pts.push(p);
        }
    }
    pts
}

fn acceptable(pts: &[[f64; 2]], size: f64) -> bool {
    let margin = 1.0;
    let min_dist = (0.08 * size).max(1.0);
    let inside = pts
        .iter()
        .all(|p| p[0] >= margin && p[0] <= size - 1.0 - margin && p[1] >= margin && p[1] <= size - 1.0 - margin);
    inside
        && pts.iter().enumerate().all(|(i, a)| {
            pts[i + 1..]
                .iter()
                .all(|b| (a[0] - b[0]).hypot(a[1] - b[1]) >= min_dist)
        })
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Parent of each keypoint in the stick figure (the wrist has none).
pub fn parent(i: usize) -> Option<usize> {
    match i {
        0 => None,
        i if (i - 1) % 4 == 0 => Some(0),
        i => Some(i - 1),
    }
}

/// Renders one `1 x size x size x 3` hand and its exact keypoints.
pub fn synth_hand(seed: u64, image_size: usize) -> Result<(Tensor, KeypointSet)> {
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::arg(format!(
            "image size {image_size} is below the minimum of {MIN_IMAGE_SIZE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = image_size as f64;
    let pts = (0..MAX_ATTEMPTS)
        .map(|_| pose(&mut rng, size))
        .find(|p| acceptable(p, size))
        .ok_or_else(|| Error::arg(format!("no valid pose found for size {image_size}")))?;
    debug_assert_eq!(pts.len(), KEYPOINTS);

    let sigma = (size / 48.0).max(1.0);
    let bone_width = (size / 64.0).max(0.5);
    let mut img = Tensor::zeros(Shape::new(1, image_size, image_size, 3)?);
    for y in 0..image_size {
        for x in 0..image_size {
            let p = [x as f64, y as f64];
            let mut blob: f64 = 0.0;
            let mut coded: f64 = 0.0;
            let mut bone: f64 = 0.0;
            for (i, k) in pts.iter().enumerate() {
                let d2 = (p[0] - k[0]).powi(2) + (p[1] - k[1]).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                blob = blob.max(g);
                let finger = if i == 0 { 0 } else { (i - 1) / 4 + 1 };
                coded = coded.max(g * (finger as f64 + 1.0) / 6.0);
                if let Some(par) = parent(i) {
                    let d = segment_distance(p, pts[par], *k);
                    bone = bone.max((1.0 - (d - bone_width).max(0.0)).clamp(0.0, 1.0) * 0.5);
                }
            }
            let px = img.pixel_mut(0, y, x);
            for (c, v) in [blob, bone, coded].into_iter().enumerate() {
                let noise = rng.random_range(0.0..NOISE_AMPLITUDE);
                px[c] = v.max(noise) as Float;
            }
        }
    }
    Ok((img, KeypointSet::new(pts)?))
}

/// `count` hands with seeds derived from `seed`.
pub fn synth_dataset(seed: u64, count: usize, image_size: usize) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| {
            let (image, keypoints) = synth_hand(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i), image_size)?;
            Ok(Sample { image, keypoints })
        })
        .collect()
}

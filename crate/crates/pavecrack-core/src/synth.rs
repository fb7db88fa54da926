//! Seeded synthetic imagery: textured road-like patches with and
//! without dark crack lines, plus full random frames.
//!
//! Used to smoke-test a fresh install end to end without survey data,
//! and by the test suites as a separable two-class source.

use image::{Rgb, RgbImage};
use rand::Rng;

/// Frame of independent noisy gray pixels.
pub fn textured_frame<R: Rng>(rng: &mut R, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    for px in img.pixels_mut() {
        let base: u8 = rng.gen_range(100..=190);
        let jitter = |v: u8, r: &mut R| v.saturating_add_signed(r.gen_range(-8..=8));
        *px = Rgb([jitter(base, rng), jitter(base, rng), jitter(base, rng)]);
    }
    img
}

/// Square asphalt-like texture patch (no crack).
pub fn texture_patch<R: Rng>(rng: &mut R, side: u32) -> RgbImage {
    textured_frame(rng, side, side)
}

/// Texture patch with one dark line crossing it.
///
/// The line runs between random points on opposite edges with a random
/// thickness, so the two classes are separable by any detector that can
/// see a dark elongated structure.
pub fn crack_patch<R: Rng>(rng: &mut R, side: u32) -> RgbImage {
    let mut img = texture_patch(rng, side);
    let s = side as f32;
    // Endpoints on opposite edges, vertical-ish or horizontal-ish.
    let (a, b) = if rng.gen_bool(0.5) {
        (
            (rng.gen_range(0.0..s), 0.0),
            (rng.gen_range(0.0..s), s - 1.0),
        )
    } else {
        (
            (0.0, rng.gen_range(0.0..s)),
            (s - 1.0, rng.gen_range(0.0..s)),
        )
    };
    let half_width = rng.gen_range(2.0..5.0) * (side as f32 / 100.0).max(0.5);
    let darkness: u8 = rng.gen_range(20..60);
    for y in 0..side {
        for x in 0..side {
            let d = point_segment_distance(x as f32, y as f32, a, b);
            if d <= half_width {
                let px = img.get_pixel_mut(x, y);
                *px = Rgb([darkness, darkness, darkness]);
            }
        }
    }
    img
}

fn point_segment_distance(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (ax, ay) = a;
    let (bx, by) = b;
    let (dx, dy) = (bx - ax, by - ay);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq == 0.0 {
        0.0
    } else {
        (((px - ax) * dx + (py - ay) * dy) / len_sq).clamp(0.0, 1.0)
    };
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// `n_per_class` crack patches and `n_per_class` clean patches.
pub fn patch_set<R: Rng>(
    rng: &mut R,
    n_per_class: usize,
    side: u32,
) -> (Vec<RgbImage>, Vec<RgbImage>) {
    let positives = (0..n_per_class).map(|_| crack_patch(rng, side)).collect();
    let negatives = (0..n_per_class).map(|_| texture_patch(rng, side)).collect();
    (positives, negatives)
}

use super::{Keypoint, IMAGE_SIZE, JOINTS};
use crate::numerics::Tensor;

/// Intensity of limb and torso strokes; joint blobs are drawn at full intensity.
pub const LIMB_INTENSITY: f64 = 0.6;
const HEAD_RADIUS: f64 = 2.0;
const JOINT_RADIUS: f64 = 1.0;
const STROKE_HALF_WIDTH: f64 = 1.0;

const NECK: usize = JOINTS;
const HIP: usize = JOINTS + 1;

/// Bones as index pairs into the joint-plus-anchor array.
pub(crate) const BONES: [(usize, usize); 6] = [(0, NECK), (NECK, 1), (NECK, 2), (NECK, HIP), (HIP, 3), (HIP, 4)];

/// Integer line rasterisation, both endpoints included.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64) -> Vec<(i64, i64)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = Vec::new();
    loop {
        out.push((x, y));
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// 1-px skeleton: value 1 on every rasterised bone pixel, 0 elsewhere.
pub fn render_skeleton(points: &[Keypoint; JOINTS + 2]) -> Tensor {
    let mut img = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
    for (a, b) in BONES {
        let (pa, pb) = (points[a], points[b]);
        for (x, y) in bresenham(
            pa.x.round() as i64,
            pa.y.round() as i64,
            pb.x.round() as i64,
            pb.y.round() as i64,
        ) {
            if (0..IMAGE_SIZE as i64).contains(&x) && (0..IMAGE_SIZE as i64).contains(&y) {
                img.set(y as usize, x as usize, 1.0);
            }
        }
    }
    img
}

fn segment_distance(px: f64, py: f64, a: Keypoint, b: Keypoint) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.x) * vx + (py - a.y) * vy) / len2).clamp(0.0, 1.0)
    };
    ((px - a.x - t * vx).powi(2) + (py - a.y - t * vy).powi(2)).sqrt()
}

/// Soft anti-aliased body: limb strokes of half-width one pixel fading over
/// one more pixel, plus a head disk and a small disk on each hand and foot.
pub fn render_body(points: &[Keypoint; JOINTS + 2]) -> Tensor {
    let mut img = Tensor::zeros(&[IMAGE_SIZE, IMAGE_SIZE]);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (px, py) = (x as f64, y as f64);
            let mut v: f64 = 0.0;
            for (a, b) in BONES {
                let d = segment_distance(px, py, points[a], points[b]);
                v = v.max(LIMB_INTENSITY * (STROKE_HALF_WIDTH + 1.0 - d).clamp(0.0, 1.0));
            }
            for (j, p) in points[..JOINTS].iter().enumerate() {
                let r = if j == 0 { HEAD_RADIUS } else { JOINT_RADIUS };
                let d = ((px - p.x).powi(2) + (py - p.y).powi(2)).sqrt();
                v = v.max((r + 1.0 - d).clamp(0.0, 1.0));
            }
            img.set(y, x, v);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bresenham_endpoints_and_continuity() {
        let line = bresenham(0, 0, 5, 2);
        assert_eq!(line.first(), Some(&(0, 0)));
        assert_eq!(line.last(), Some(&(5, 2)));
        assert_eq!(line.len(), 6);
        for w in line.windows(2) {
            assert!((w[0].0 - w[1].0).abs() <= 1 && (w[0].1 - w[1].1).abs() <= 1);
        }
        assert_eq!(bresenham(3, 3, 3, 3), vec![(3, 3)]);
    }

    #[test]
    fn segment_distance_cases() {
        let a = Keypoint::new(0.0, 0.0);
        let b = Keypoint::new(4.0, 0.0);
        assert_eq!(segment_distance(2.0, 3.0, a, b), 3.0);
        assert_eq!(segment_distance(7.0, 4.0, a, b), 5.0);
    }
}

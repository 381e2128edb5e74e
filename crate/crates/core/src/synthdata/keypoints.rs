use super::{Keypoint, PoseClass, IMAGE_SIZE, JOINTS};
use crate::numerics::Tensor;

/// Joint blobs are the only pixels above this fraction of the image maximum.
const BLOB_FLOOR: f64 = 0.65;
const GLOBAL_SEARCH: i64 = 4;
const LOCAL_SEARCH: i64 = 3;
const WINDOW_RADIUS: i64 = 2;

fn weight(img: &Tensor, floor: f64, x: i64, y: i64) -> f64 {
    let n = IMAGE_SIZE as i64;
    if x < 0 || y < 0 || x >= n || y >= n {
        return 0.0;
    }
    (img.get(y as usize, x as usize) - floor).max(0.0)
}

/// 3×3 sum of above-floor intensity.
fn blob_response(img: &Tensor, floor: f64, x: i64, y: i64) -> f64 {
    let mut s = 0.0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            s += weight(img, floor, x + dx, y + dy);
        }
    }
    s
}

fn centroid(img: &Tensor, floor: f64, cx: i64, cy: i64) -> Option<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for dy in -WINDOW_RADIUS..=WINDOW_RADIUS {
        for dx in -WINDOW_RADIUS..=WINDOW_RADIUS {
            let w = weight(img, floor, cx + dx, cy + dy);
            sw += w;
            sx += w * (cx + dx) as f64;
            sy += w * (cy + dy) as f64;
        }
    }
    (sw > 1e-9).then(|| (sx / sw, sy / sw))
}

/// Locates each joint of `class` in `image`.
///
/// The class template is first aligned by the integer translation that
/// maximises blob response summed over the joints. Each joint then moves to
/// the strongest blob within a small neighbourhood, and its position is the
/// intensity-weighted centroid of the 5×5 window there (refined once).
/// `None` marks a joint that could not be found.
pub fn extract_keypoints(image: &Tensor, class: PoseClass) -> Vec<Option<Keypoint>> {
    let max = image.data().iter().copied().fold(0.0, f64::max);
    if image.shape() != [IMAGE_SIZE, IMAGE_SIZE] || max <= 1e-6 {
        return vec![None; JOINTS];
    }
    let floor = BLOB_FLOOR * max;
    let template: Vec<(i64, i64)> = class
        .template_keypoints()
        .iter()
        .map(|k| (k.x.round() as i64, k.y.round() as i64))
        .collect();

    let mut best: (f64, i64, i64) = (f64::NEG_INFINITY, 0, 0);
    for dy in -GLOBAL_SEARCH..=GLOBAL_SEARCH {
        for dx in -GLOBAL_SEARCH..=GLOBAL_SEARCH {
            let s: f64 = template.iter().map(|&(x, y)| blob_response(image, floor, x + dx, y + dy)).sum();
            let closer = dx.abs() + dy.abs() < best.1.abs() + best.2.abs();
            if s > best.0 || (s == best.0 && closer) {
                best = (s, dx, dy);
            }
        }
    }
    let (gdx, gdy) = (best.1, best.2);

    template
        .iter()
        .map(|&(tx, ty)| {
            let (ax, ay) = (tx + gdx, ty + gdy);
            let mut local = (f64::NEG_INFINITY, ax, ay);
            for dy in -LOCAL_SEARCH..=LOCAL_SEARCH {
                for dx in -LOCAL_SEARCH..=LOCAL_SEARCH {
                    let r = blob_response(image, floor, ax + dx, ay + dy);
                    let closer = dx.abs() + dy.abs() < (local.1 - ax).abs() + (local.2 - ay).abs();
                    if r > local.0 || (r == local.0 && closer) {
                        local = (r, ax + dx, ay + dy);
                    }
                }
            }
            if local.0 <= 1e-9 {
                return None;
            }
            let (x, y) = centroid(image, floor, local.1, local.2)?;
            let (x, y) = centroid(image, floor, x.round() as i64, y.round() as i64)?;
            Some(Keypoint::new(x, y))
        })
        .collect()
}

/// Mean Euclidean error over successfully extracted joints, and the number of failures.
pub fn mean_keypoint_error(found: &[Option<Keypoint>], truth: &[Keypoint]) -> (f64, usize) {
    let mut total = 0.0;
    let mut hits = 0usize;
    let mut failed = 0usize;
    for (f, t) in found.iter().zip(truth) {
        match f {
            Some(k) => {
                total += k.dist(t);
                hits += 1;
            }
            None => failed += 1,
        }
    }
    (if hits == 0 { f64::INFINITY } else { total / hits as f64 }, failed)
}

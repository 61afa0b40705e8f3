use rand::Rng;

use crate::image::Image;

/// Jitter each edge of the full-image window independently by up to
/// `max_offset` pixels, which moves both its size and its centre, then crop
/// every plane to that window (zero outside the image) and resize it to
/// `target` with bicubic interpolation. All planes share one window.
pub fn augment_window<R: Rng>(planes: &[Image], target: (usize, usize), max_offset: f64, rng: &mut R) -> Vec<Image> {
    let Some(first) = planes.first() else {
        return Vec::new();
    };
    let (h, w) = (first.height as f64, first.width as f64);
    let mut jitter = || if max_offset > 0.0 { rng.random_range(-max_offset..=max_offset) } else { 0.0 };
    let top = jitter();
    let bottom = h + jitter();
    let left = jitter();
    let right = w + jitter();
    if top == 0.0 && left == 0.0 && bottom == h && right == w && target == (first.height, first.width) {
        return planes.to_vec();
    }
    planes
        .iter()
        .map(|p| p.crop_resize_bicubic(top, left, bottom - top, right - left, target.0, target.1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|i| 0.2 + (i % w) as f32 / w as f32).collect()).unwrap()
    }

    #[test]
    fn zero_offset_is_identity() {
        let img = ramp(30, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_window(&[img.clone()], (30, 20), 0.0, &mut rng), vec![img.clone()]);
        let resized = augment_window(&[img.clone()], (15, 10), 0.0, &mut rng);
        assert_eq!((resized[0].height, resized[0].width), (15, 10));
    }

    #[test]
    fn offsets_are_bounded_and_cover_the_range() {
        let max = 6.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for _ in 0..1000 {
            let mut r2 = rng.clone();
            let draws: Vec<f64> = (0..4).map(|_| r2.random_range(-max..=max)).collect();
            let _ = augment_window(&[ramp(8, 8)], (8, 8), max, &mut rng);
            for d in draws {
                assert!(d.abs() <= max);
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
        assert!(hi - lo >= 0.9 * 2.0 * max);
    }

    #[test]
    fn window_past_left_edge_pads_with_zero() {
        let img = ramp(20, 20);
        // Force the window's left edge well outside the image.
        let out = img.crop_resize_bicubic(0.0, -6.0, 20.0, 26.0, 20, 26);
        for y in 0..20 {
            for x in 0..4 {
                assert_eq!(out.get(y, x), 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let planes = augment_window(&[img.clone(), img], (20, 20), 4.0, &mut rng);
        assert_eq!(planes[0], planes[1]);
    }
}

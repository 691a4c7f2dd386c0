//! Random horizontal flip and crop-and-resize, applied identically to every
//! aligned map of a sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labels::LabelMap;
use crate::tensor::{resize_bilinear, Shape, Tensor};

use super::dataset::RgbtSample;

pub const MIN_CROP_SCALE: f64 = 0.75;

/// One geometric transform: optional flip, then a crop window that is
/// resized back to the original `height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub height: usize,
    pub width: usize,
    pub flip: bool,
    pub top: usize,
    pub left: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl Augmentation {
    pub fn identity(height: usize, width: usize) -> Self {
        Augmentation {
            height,
            width,
            flip: false,
            top: 0,
            left: 0,
            crop_h: height,
            crop_w: width,
        }
    }

    /// Flip with probability 1/2; crop scale uniform in [0.75, 1] per axis.
    pub fn sample(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let flip = rng.gen_bool(0.5);
        let mut side = |len: usize| {
            let scale = rng.gen_range(MIN_CROP_SCALE..=1.0);
            let crop = ((scale * len as f64).round() as usize).clamp(1, len);
            let start = rng.gen_range(0..=len - crop);
            (start, crop)
        };
        let (top, crop_h) = side(height);
        let (left, crop_w) = side(width);
        Augmentation {
            height,
            width,
            flip,
            top,
            left,
            crop_h,
            crop_w,
        }
    }

    pub fn from_seed(height: usize, width: usize, seed: u64) -> Self {
        Augmentation::sample(height, width, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Source column in the unflipped image for column `x` of the crop.
    fn source_x(&self, x: usize) -> usize {
        let x = self.left + x;
        if self.flip {
            self.width - 1 - x
        } else {
            x
        }
    }

    fn crop_tensor(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, self.crop_h, self.crop_w));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..self.crop_h {
                    for x in 0..self.crop_w {
                        out.set(n, c, y, x, t.at(n, c, self.top + y, self.source_x(x)));
                    }
                }
            }
        }
        out
    }

    /// Bilinear resampling for intensity images.
    pub fn apply_image(&self, t: &Tensor) -> Tensor {
        let s = t.shape();
        assert_eq!((s.h, s.w), (self.height, self.width), "augmentation built for another size");
        resize_bilinear(&self.crop_tensor(t), self.height, self.width)
    }

    /// Nearest-neighbour resampling, so no new label values appear.
    pub fn apply_labels(&self, m: &LabelMap) -> LabelMap {
        assert_eq!((m.height(), m.width()), (self.height, self.width), "augmentation built for another size");
        let ys: Vec<usize> = (0..self.height).map(|y| self.top + nearest(y, self.crop_h, self.height)).collect();
        let xs: Vec<usize> = (0..self.width)
            .map(|x| self.source_x(nearest(x, self.crop_w, self.width)))
            .collect();
        let mut out = m.clone();
        for n in 0..m.n() {
            for (y, &sy) in ys.iter().enumerate() {
                for (x, &sx) in xs.iter().enumerate() {
                    out.set(n, y, x, m.get(n, sy, sx));
                }
            }
        }
        out
    }

    pub fn apply(&self, sample: &RgbtSample) -> RgbtSample {
        RgbtSample {
            id: sample.id.clone(),
            rgb: self.apply_image(&sample.rgb),
            tir: self.apply_image(&sample.tir),
            gt_sem: self.apply_labels(&sample.gt_sem),
            tag: sample.tag,
        }
    }
}

/// Nearest source index under half-pixel centres.
pub fn nearest(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Applies a transform drawn from `seed` to the whole sample.
pub fn augment(sample: &RgbtSample, seed: u64) -> RgbtSample {
    Augmentation::from_seed(sample.height(), sample.width(), seed).apply(sample)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> LabelMap {
        LabelMap::new(h, w, (0..h * w).map(|i| (i % 251) as u8).collect()).unwrap()
    }

    #[test]
    fn identity_changes_nothing() {
        let m = ramp(6, 10);
        let a = Augmentation::identity(6, 10);
        assert_eq!(a.apply_labels(&m), m);
        let t = Tensor::from_vec(Shape::new(1, 1, 6, 10), (0..60).map(f64::from).collect()).unwrap();
        assert_eq!(a.apply_image(&t), t);
    }

    #[test]
    fn double_flip_restores() {
        let m = ramp(5, 7);
        let flip = Augmentation {
            flip: true,
            ..Augmentation::identity(5, 7)
        };
        let once = flip.apply_labels(&m);
        assert_ne!(once, m);
        assert_eq!(once.get(0, 2, 0), m.get(0, 2, 6));
        assert_eq!(flip.apply_labels(&once), m);
    }

    #[test]
    fn nearest_index_rule() {
        assert_eq!((0..4).map(|d| nearest(d, 2, 4)).collect::<Vec<_>>(), [0, 0, 1, 1]);
        assert_eq!((0..3).map(|d| nearest(d, 3, 3)).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn sampled_windows_are_in_range_and_seeded() {
        let mut flips = 0;
        for seed in 0..200 {
            let a = Augmentation::from_seed(64, 96, seed);
            assert!(a.crop_h >= 48 && a.top + a.crop_h <= 64);
            assert!(a.crop_w >= 72 && a.left + a.crop_w <= 96);
            assert_eq!(a, Augmentation::from_seed(64, 96, seed));
            flips += usize::from(a.flip);
        }
        assert!((60..140).contains(&flips));
    }
}

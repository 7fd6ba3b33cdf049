//! Training-time geometric augmentation: the eight symmetries of the square
//! (rotations by 90-degree multiples, optionally composed with a horizontal
//! flip), applied identically to image and mask.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::mix_seed;

/// One of the eight dihedral symmetries: `rot90` applied `quarter_turns`
/// times, then a horizontal flip if `hflip`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub hflip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        hflip: false,
    };

    pub fn all() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, d) in out.iter_mut().enumerate() {
            d.quarter_turns = (i % 4) as u8;
            d.hflip = i >= 4;
        }
        out
    }

    pub fn from_index(i: u8) -> Dihedral {
        Dihedral {
            quarter_turns: i % 4,
            hflip: (i % 8) >= 4,
        }
    }

    /// Output size after the rotation part (odd turn counts swap the axes).
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Source coordinates for output position `(y, x)`.
    fn source(&self, y: usize, x: usize, out_h: usize, out_w: usize) -> (usize, usize) {
        // undo the horizontal flip first (it was applied last)
        let x = if self.hflip { out_w - 1 - x } else { x };
        // undo the rotation: rot90 counter-clockwise maps (y, x) <- (x, W-1-y)
        match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, out_h - 1 - y),
            2 => (out_h - 1 - y, out_w - 1 - x),
            3 => (out_w - 1 - x, y),
            _ => unreachable!(),
        }
    }
}

pub fn apply_to_mask(d: Dihedral, mask: &Array2<u8>) -> Array2<u8> {
    let (h, w) = mask.dim();
    let (oh, ow) = d.output_hw(h, w);
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let (sy, sx) = d.source(y, x, oh, ow);
        mask[[sy, sx]]
    })
}

/// Transforms an `[H, W, C]` raster.
pub fn apply_to_image(d: Dihedral, image: &Array3<u8>) -> Array3<u8> {
    let (h, w, c) = image.dim();
    let (oh, ow) = d.output_hw(h, w);
    Array3::from_shape_fn((oh, ow, c), |(y, x, ci)| {
        let (sy, sx) = d.source(y, x, oh, ow);
        image[[sy, sx, ci]]
    })
}

/// The transform for a given sample is a pure function of
/// `(seed, epoch, sample_index)`: worker scheduling can never change which
/// transform a sample receives.
pub fn transform_for(seed: u64, epoch: u64, sample_index: u64) -> Dihedral {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x4175_67, epoch, sample_index]));
    Dihedral::from_index(rng.random_range(0..8) as u8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample_mask() -> Array2<u8> {
        array![[0u8, 1, 2], [3, 4, 5]]
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let m = sample_mask();
        let rot = Dihedral {
            quarter_turns: 1,
            hflip: false,
        };
        let mut cur = m.clone();
        for _ in 0..4 {
            cur = apply_to_mask(rot, &cur);
        }
        assert_eq!(cur, m);
    }

    #[test]
    fn double_hflip_is_identity() {
        let m = sample_mask();
        let flip = Dihedral {
            quarter_turns: 0,
            hflip: true,
        };
        assert_eq!(apply_to_mask(flip, &apply_to_mask(flip, &m)), m);
    }

    #[test]
    fn rot90_moves_corners_correctly() {
        let m = sample_mask();
        let rot = Dihedral {
            quarter_turns: 1,
            hflip: false,
        };
        let r = apply_to_mask(rot, &m);
        assert_eq!(r.dim(), (3, 2));
        // counter-clockwise: top-right corner becomes top-left
        assert_eq!(r[[0, 0]], m[[0, 2]]);
        assert_eq!(r[[2, 1]], m[[1, 0]]);
    }

    #[test]
    fn vertical_flip_is_in_the_group() {
        // v-flip = rot180 then h-flip
        let m = sample_mask();
        let v = Dihedral {
            quarter_turns: 2,
            hflip: true,
        };
        let r = apply_to_mask(v, &m);
        assert_eq!(r, array![[3u8, 4, 5], [0, 1, 2]]);
    }

    #[test]
    fn class_histogram_is_invariant() {
        let m = sample_mask();
        for d in Dihedral::all() {
            let r = apply_to_mask(d, &m);
            let mut a: Vec<u8> = m.iter().copied().collect();
            let mut b: Vec<u8> = r.iter().copied().collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b, "{d:?} changed the histogram");
        }
    }

    #[test]
    fn image_and_mask_receive_the_same_transform() {
        let m = sample_mask();
        let img = Array3::from_shape_fn((2, 3, 3), |(y, x, _)| m[[y, x]] * 10);
        for d in Dihedral::all() {
            let rm = apply_to_mask(d, &m);
            let ri = apply_to_image(d, &img);
            for ((y, x), &v) in rm.indexed_iter() {
                assert_eq!(ri[[y, x, 0]], v * 10);
            }
        }
    }

    #[test]
    fn transform_sequence_is_reproducible() {
        let a: Vec<Dihedral> = (0..32).map(|i| transform_for(9, 4, i)).collect();
        let b: Vec<Dihedral> = (0..32).map(|i| transform_for(9, 4, i)).collect();
        assert_eq!(a, b);
        let c: Vec<Dihedral> = (0..32).map(|i| transform_for(9, 5, i)).collect();
        assert_ne!(a, c, "different epochs should draw different transforms");
    }

    #[test]
    fn transforms_cover_the_whole_group() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..4096u64 {
            let d = transform_for(1, 0, i);
            seen.insert((d.quarter_turns, d.hflip));
        }
        assert_eq!(seen.len(), 8, "all eight symmetries should occur");
    }
}

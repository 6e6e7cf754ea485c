//! Integer random-shift augmentation shared by images and masks.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

/// Crop offset into the replicate-padded image, each in `[0, 2·pad]`.
/// Content moves by `(dx − pad, dy − pad)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub dx: usize,
    pub dy: usize,
}

impl Offset {
    pub fn sample(pad: usize, rng: &mut Rng) -> Self {
        let dx = rng.below(2 * pad + 1);
        let dy = rng.below(2 * pad + 1);
        Self { dx, dy }
    }

    /// Index into the 9×9 (for pad 4) grid, row-major in `dy`.
    pub fn cell(&self, pad: usize) -> usize {
        self.dy * (2 * pad + 1) + self.dx
    }
}

/// Shifts every `size × size` plane of `src` by `offset`, replicating the
/// border.
pub fn shift_planes<T: Copy>(src: &[T], size: usize, pad: usize, offset: Offset) -> Vec<T> {
    assert_eq!(src.len() % (size * size), 0, "planes must be {size}x{size}");
    let mut out = Vec::with_capacity(src.len());
    let map = |i: usize, d: usize| (i + pad).saturating_sub(d).min(size - 1);
    for plane in src.chunks(size * size) {
        for r in 0..size {
            let row = &plane[map(r, offset.dy) * size..][..size];
            out.extend((0..size).map(|c| row[map(c, offset.dx)]));
        }
    }
    out
}

/// Applies one offset to an image stack and its mask stack.
pub fn random_shift<T: Copy>(
    image: &[T],
    mask: &[T],
    size: usize,
    pad: usize,
    rng: &mut Rng,
) -> (Vec<T>, Vec<T>, Offset) {
    let offset = Offset::sample(pad, rng);
    (
        shift_planes(image, size, pad, offset),
        shift_planes(mask, size, pad, offset),
        offset,
    )
}

/// Per-sample offsets that were actually applied during updates, recorded
/// separately for the image and the mask.
#[derive(Clone, Debug, Default)]
pub struct ShiftLog {
    pub image: Vec<Offset>,
    pub mask: Vec<Offset>,
}

impl ShiftLog {
    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    /// Fraction of recorded samples whose image and mask offsets agree.
    pub fn agreement(&self) -> f64 {
        if self.image.is_empty() {
            return 1.0;
        }
        let same = self.image.iter().zip(&self.mask).filter(|(a, b)| a == b).count();
        same as f64 / self.image.len() as f64
    }
}

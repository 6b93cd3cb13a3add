use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::ImageBuffer;

/// Training-time flip/rotation, applied as horizontal flip, then vertical
/// flip, then a clockwise quarter turn. The eight combinations are the
/// symmetry group of the square.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Augment {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment {
        hflip: false,
        vflip: false,
        rot90: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augment {
            hflip: rng.gen(),
            vflip: rng.gen(),
            rot90: rng.gen(),
        }
    }

    pub fn all() -> impl Iterator<Item = Augment> {
        (0..8u8).map(|i| Augment {
            hflip: i & 1 != 0,
            vflip: i & 2 != 0,
            rot90: i & 4 != 0,
        })
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        let mut out = img.clone();
        if self.hflip {
            out = flip_horizontal(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        if self.rot90 {
            out = rotate_cw(&out);
        }
        out
    }

    /// Undoes [`Augment::apply`].
    pub fn invert(&self, img: &ImageBuffer) -> ImageBuffer {
        let mut out = img.clone();
        if self.rot90 {
            out = rotate_ccw(&out);
        }
        if self.vflip {
            out = flip_vertical(&out);
        }
        if self.hflip {
            out = flip_horizontal(&out);
        }
        out
    }
}

fn remap(
    img: &ImageBuffer,
    out_h: usize,
    out_w: usize,
    src: impl Fn(usize, usize) -> (usize, usize),
) -> ImageBuffer {
    let c = img.channels();
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            let base = (sy * img.width() + sx) * c;
            data.extend_from_slice(&img.data()[base..base + c]);
        }
    }
    ImageBuffer::new(out_h, out_w, img.color(), img.range(), data).expect("same pixel count")
}

pub fn flip_horizontal(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = img.dims();
    remap(img, h, w, |y, x| (y, w - 1 - x))
}

pub fn flip_vertical(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = img.dims();
    remap(img, h, w, |y, x| (h - 1 - y, x))
}

pub fn rotate_cw(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = img.dims();
    remap(img, w, h, |y, x| (h - 1 - x, y))
}

pub fn rotate_ccw(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = img.dims();
    remap(img, w, h, |y, x| (x, w - 1 - y))
}

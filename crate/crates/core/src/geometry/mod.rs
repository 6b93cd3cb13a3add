//! Random perspective pairs for the second (reference-reconstruction) pass:
//! perturb the four corners of the crop box, solve the homography, warp and
//! keep the original box.

mod homography;
mod warp;

pub use homography::{solve_homography, Homography, Point};
pub use warp::warp_perspective;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

/// LR to HR scale factor of the whole toolkit.
pub const SR_SCALE: usize = 4;

/// Magnitude band for each vertex-offset component; the sign is drawn
/// separately, so the support is `[-hi, -lo] U [lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRange {
    lo: f64,
    hi: f64,
}

impl PerturbationRange {
    /// Default band of 5 to 20 px.
    pub const DEFAULT: PerturbationRange = PerturbationRange { lo: 5.0, hi: 20.0 };

    /// Requires `0 < lo <= hi`; `lo == hi` collapses the band to one magnitude.
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::invalid(format!(
                "perturbation range needs 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        Ok(PerturbationRange { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

impl Default for PerturbationRange {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Eight independent components: uniform magnitude in the band, fair sign.
pub fn sample_vertex_offsets<R: Rng + ?Sized>(
    rng: &mut R,
    range: PerturbationRange,
) -> [Point; 4] {
    let mut out = [[0.0; 2]; 4];
    for vertex in &mut out {
        for comp in vertex.iter_mut() {
            let mag = if range.lo == range.hi {
                range.lo
            } else {
                rng.gen_range(range.lo..=range.hi)
            };
            *comp = if rng.gen::<bool>() { mag } else { -mag };
        }
    }
    out
}

/// Warped HR/LR pair sharing one geometric transform.
#[derive(Clone, Debug, PartialEq)]
pub struct PerspectivePair {
    pub lr_warped: ImageBuffer,
    pub hr_warped: ImageBuffer,
    pub h_hr: Homography,
    pub h_lr: Homography,
    /// Vertex offsets at HR resolution, clockwise from top-left.
    pub offsets: [Point; 4],
}

/// Corners of a `w x h` box in continuous coordinates.
pub fn box_corners(height: usize, width: usize) -> [Point; 4] {
    let (h, w) = (height as f64, width as f64);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

pub fn make_perspective_pair<R: Rng + ?Sized>(
    y_lr: &ImageBuffer,
    y_hr: &ImageBuffer,
    rng: &mut R,
    range: PerturbationRange,
) -> Result<PerspectivePair> {
    let (lh, lw) = y_lr.dims();
    let (hh, hw) = y_hr.dims();
    if hh != SR_SCALE * lh || hw != SR_SCALE * lw {
        return Err(Error::invalid(format!(
            "HR {hh}x{hw} is not {SR_SCALE}x LR {lh}x{lw}"
        )));
    }
    let offsets = sample_vertex_offsets(rng, range);
    let src = box_corners(hh, hw);
    let mut dst = src;
    for (d, o) in dst.iter_mut().zip(&offsets) {
        d[0] += o[0];
        d[1] += o[1];
    }
    let h_hr = solve_homography(&src, &dst)?;
    let h_lr = h_hr.conjugate_scale(SR_SCALE as f64);
    Ok(PerspectivePair {
        hr_warped: warp_perspective(y_hr, &h_hr)?,
        lr_warped: warp_perspective(y_lr, &h_lr)?,
        h_hr,
        h_lr,
        offsets,
    })
}

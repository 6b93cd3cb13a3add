//! Fast invariant checks, runnable from the command line in a few seconds.
//!
//! Each probe returns the worst observed error so callers can apply their
//! own tolerance; [`run_all`] applies the default ones.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::stitch_references;
use crate::geometry::{box_corners, sample_vertex_offsets, solve_homography, PerturbationRange};
use crate::imaging::{psnr, ssim, ColorSpace, ImageBuffer, ValueRange, PSNR_PEAK};
use crate::tensor::{Float, Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<28} {}", self.name, self.detail)
    }
}

fn rand_tensor<T: Float>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::c(rng.gen_range(lo..hi))).collect())
}

fn max_abs_diff<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .fold(0.0, f64::max)
}

/// Worst `|sum_k a_k (E_k * f) - (sum_k a_k E_k) * f|` over `trials` random
/// draws, cycling the bank size through 1, 2 and 16.
pub fn kernel_mixing<T: Float>(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let k = [1, 2, 16][t % 3];
        let (c, h, w) = (rng.gen_range(1..=4), rng.gen_range(3..=8), rng.gen_range(3..=8));
        let bank = rand_tensor::<T>(&[k, c, c, 3, 3], &mut rng, -1.0, 1.0);
        let f = rand_tensor::<T>(&[1, c, h, w], &mut rng, -1.0, 1.0);
        let alpha = rand_tensor::<T>(&[1, k], &mut rng, 0.0, 1.0);
        let mut g = Graph::inference();
        let (bv, fv, av) = (g.constant(bank.clone()), g.constant(f), g.constant(alpha.clone()));
        let mixed = g.kernel_mix(av, bv);
        let lhs = g.conv2d(fv, mixed, None, 1, 1);
        let per = bank.numel() / k;
        let mut acc = Tensor::<T>::zeros(g.shape(lhs));
        for i in 0..k {
            let e = g.constant(Tensor::from_vec(&[c, c, 3, 3], bank.data()[i * per..(i + 1) * per].to_vec()));
            let yi = g.conv2d(fv, e, None, 1, 1);
            let a = alpha.data()[i];
            let y = g.value(yi).data().to_vec();
            for (o, v) in acc.data_mut().iter_mut().zip(y) {
                *o += a * v;
            }
        }
        worst = worst.max(max_abs_diff(g.value(lhs), &acc));
    }
    worst
}

/// Worst gap between a deformable conv with zero offsets and unit masks and
/// the plain 3x3 conv with the same weights.
pub fn degenerate_deformable(trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c, co) = (rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=6));
        let (h, w) = (rng.gen_range(2..=10), rng.gen_range(2..=10));
        let mut g = Graph::<f32>::inference();
        let x = g.constant(rand_tensor(&[n, c, h, w], &mut rng, -1.0, 1.0));
        let wt = g.constant(rand_tensor(&[co, c, 3, 3], &mut rng, -1.0, 1.0));
        let b = g.constant(rand_tensor(&[co], &mut rng, -1.0, 1.0));
        let off = g.constant(Tensor::zeros(&[n, 18, h, w]));
        let mask = g.constant(Tensor::full(&[n, 9, h, w], 1.0));
        let pre = Some(Arc::from(vec![[0, 0]; n * h * w]));
        let d = g.deform_conv(x, off, mask, wt, Some(b), pre);
        let p = g.conv2d(x, wt, Some(b), 1, 1);
        worst = worst.max(max_abs_diff(g.value(d), g.value(p)));
    }
    worst
}

/// Worst corner residual of four-point homography fits for perturbations
/// drawn from `range` on a `size x size` box.
pub fn homography_residual(trials: usize, seed: u64, size: usize, range: PerturbationRange) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src = box_corners(size, size);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let offsets = sample_vertex_offsets(&mut rng, range);
        let mut dst = src;
        for (d, o) in dst.iter_mut().zip(&offsets) {
            d[0] += o[0];
            d[1] += o[1];
        }
        let Ok(h) = solve_homography(&src, &dst) else {
            return f64::INFINITY;
        };
        for (s, d) in src.iter().zip(&dst) {
            let p = h.apply(*s);
            worst = worst.max((p[0] - d[0]).abs().max((p[1] - d[1]).abs()));
        }
    }
    worst
}

/// PSNR of an image against itself plus one grey level, SSIM of an image
/// with itself, and the dims of a five-reference stitched canvas.
pub fn metric_oracles(seed: u64) -> (f64, f64, (usize, usize)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0..250) as f32).collect();
    let a = ImageBuffer::new(32, 32, ColorSpace::Y, ValueRange::Byte, data).expect("valid dims");
    let b = a.map(|v| v + 1.0);
    let off_by_one = psnr(&a, &b, PSNR_PEAK).unwrap_or(f64::NAN);
    let same = ssim(&a, &a).unwrap_or(f64::NAN);
    let refs: crate::Result<Vec<ImageBuffer>> = (0..5)
        .map(|i| ImageBuffer::filled(100 + 40 * i, 500 - 50 * i, ColorSpace::Rgb, ValueRange::Unit, 0.5))
        .collect();
    let dims = refs.and_then(|r| stitch_references(&r, 500, 5)).map_or((0, 0), |c| c.dims());
    (off_by_one, same, dims)
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

pub fn run_all() -> Vec<Check> {
    let m32 = kernel_mixing::<f32>(30, 1);
    let m64 = kernel_mixing::<f64>(30, 1);
    let deform = degenerate_deformable(10, 2);
    let homog = homography_residual(200, 3, 160, PerturbationRange::DEFAULT);
    let (p, s, dims) = metric_oracles(4);
    vec![
        check("kernel mixing identity f32", m32 <= 1e-4, format!("max err {m32:.3e} (tol 1e-4)")),
        check("kernel mixing identity f64", m64 <= 1e-8, format!("max err {m64:.3e} (tol 1e-8)")),
        check("deformable conv degeneracy", deform <= 1e-4, format!("max err {deform:.3e} (tol 1e-4)")),
        check("homography corner residual", homog <= 1e-8, format!("max err {homog:.3e} (tol 1e-8)")),
        check("psnr off-by-one", (p - 48.1308).abs() <= 1e-3, format!("{p:.4} dB (want 48.1308)")),
        check("ssim identity", s == 1.0, format!("{s}")),
        check("stitched canvas", dims == (500, 2500), format!("{}x{} (h x w)", dims.0, dims.1)),
    ]
}

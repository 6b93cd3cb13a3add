//! Numeric kernels behind the convolution-like graph ops.
//!
//! Layouts are NCHW. Convolution weights are `(Co, Ci, k, k)`; a rank-5
//! `(N, Co, Ci, k, k)` weight gives every sample its own kernel.

use super::Float;

/// Geometry of a square-kernel convolution on one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(ci: usize, h: usize, w: usize, co: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.co * self.ho * self.wo
    }

    fn w_len(&self) -> usize {
        self.co * self.rows()
    }

    fn trivial(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output indices `[lo, hi)` whose tap `t` lands inside `0..n`, and the
/// input index of `lo`.
#[inline]
fn valid_span(g: &ConvGeom, t: usize, n: usize, outs: usize) -> (usize, usize, usize) {
    let lo = if g.pad > t { (g.pad - t).div_ceil(g.stride) } else { 0 };
    let hi = if n + g.pad > t { ((n + g.pad - t - 1) / g.stride + 1).min(outs) } else { 0 };
    let hi = hi.max(lo);
    (lo, hi, (lo * g.stride + t).saturating_sub(g.pad))
}

fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi, _) = valid_span(g, ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi, ix0) = valid_span(g, kx, g.w, g.wo);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi || xlo == xhi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                    } else {
                        for (j, v) in line[xlo..xhi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let hw = g.cols();
    for c in 0..g.ci {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi, _) = valid_span(g, ky, g.h, g.ho);
            for kx in 0..g.k {
                let (xlo, xhi, ix0) = valid_span(g, kx, g.w, g.wo);
                if xlo == xhi {
                    continue;
                }
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let line = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of `n` samples.
pub(crate) fn conv_forward<T: Float>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    w: &[T],
    per_sample: bool,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (kk, hw) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * g.out_len()];
    let mut cols = if g.trivial() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let ws = if per_sample { &w[s * g.w_len()..(s + 1) * g.w_len()] } else { w };
        let os = &mut out[s * g.out_len()..(s + 1) * g.out_len()];
        let c: &[T] = if g.trivial() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        T::gemm(g.co, kk, hw, ws, (kk, 1), c, (hw, 1), os, T::zero());
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                os[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradient w.r.t. the input; also the forward of a transposed convolution.
pub(crate) fn conv_grad_input<T: Float>(g: &ConvGeom, n: usize, gy: &[T], w: &[T], per_sample: bool) -> Vec<T> {
    let (kk, hw) = (g.rows(), g.cols());
    let mut gx = vec![T::zero(); n * g.in_len()];
    let mut gcols = vec![T::zero(); kk * hw];
    for s in 0..n {
        let ws = if per_sample { &w[s * g.w_len()..(s + 1) * g.w_len()] } else { w };
        let gys = &gy[s * g.out_len()..(s + 1) * g.out_len()];
        let gxs = &mut gx[s * g.in_len()..(s + 1) * g.in_len()];
        if g.trivial() {
            T::gemm(kk, g.co, hw, ws, (1, kk), gys, (hw, 1), gxs, T::zero());
        } else {
            T::gemm(kk, g.co, hw, ws, (1, kk), gys, (hw, 1), &mut gcols, T::zero());
            col2im(g, &gcols, gxs);
        }
    }
    gx
}

/// Gradient w.r.t. the weight: summed over samples when shared, stacked
/// when per-sample.
pub(crate) fn conv_grad_weight<T: Float>(g: &ConvGeom, n: usize, x: &[T], gy: &[T], per_sample: bool) -> Vec<T> {
    let (kk, hw) = (g.rows(), g.cols());
    let mut gw = vec![T::zero(); if per_sample { n } else { 1 } * g.w_len()];
    let mut cols = if g.trivial() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
        let gys = &gy[s * g.out_len()..(s + 1) * g.out_len()];
        let c: &[T] = if g.trivial() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let dst = if per_sample {
            &mut gw[s * g.w_len()..(s + 1) * g.w_len()]
        } else {
            &mut gw[..]
        };
        T::gemm(g.co, hw, kk, gys, (hw, 1), c, (1, hw), dst, T::one());
    }
    gw
}

pub(crate) fn bias_grad<T: Float>(n: usize, co: usize, hw: usize, gy: &[T]) -> Vec<T> {
    let mut gb = vec![T::zero(); co];
    for s in 0..n {
        for (o, b) in gb.iter_mut().enumerate() {
            let start = (s * co + o) * hw;
            *b += gy[start..start + hw].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Geometry of a 3x3 modulated deformable convolution: input `(C, hr, wr)`
/// sampled at an `h x w` grid of output positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DeformGeom {
    pub c: usize,
    pub hr: usize,
    pub wr: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) const TAPS: usize = 9;

struct Bilinear<T> {
    idx: [Option<usize>; 4],
    wt: [T; 4],
    // d(weight)/dy and d(weight)/dx per corner
    dy: [T; 4],
    dx: [T; 4],
}

impl DeformGeom {
    fn hw(&self) -> usize {
        self.h * self.w
    }

    fn in_len(&self) -> usize {
        self.c * self.hr * self.wr
    }

    /// Sampling location of tap `t` at output pixel `p` for sample `s`.
    #[inline]
    fn location<T: Float>(&self, off: &[T], pre: Option<&[[i32; 2]]>, t: usize, p: usize) -> (T, T) {
        let hw = self.hw();
        let (y, x) = (p / self.w, p % self.w);
        let (ky, kx) = (t / 3, t % 3);
        let (py0, px0) = pre.map_or((0, 0), |pr| (pr[p][0], pr[p][1]));
        let by = (y as i64 + py0 as i64 + ky as i64 - 1) as f64;
        let bx = (x as i64 + px0 as i64 + kx as i64 - 1) as f64;
        (
            T::c(by) + off[(2 * t) * hw + p],
            T::c(bx) + off[(2 * t + 1) * hw + p],
        )
    }

    fn corners<T: Float>(&self, py: T, px: T) -> Bilinear<T> {
        let (y0f, x0f) = (py.floor(), px.floor());
        let (ly, lx) = (py - y0f, px - x0f);
        let (hy, hx) = (T::one() - ly, T::one() - lx);
        let (y0, x0) = (y0f.f64() as i64, x0f.f64() as i64);
        let at = |yy: i64, xx: i64| {
            (yy >= 0 && xx >= 0 && (yy as usize) < self.hr && (xx as usize) < self.wr)
                .then(|| yy as usize * self.wr + xx as usize)
        };
        Bilinear {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            wt: [hy * hx, hy * lx, ly * hx, ly * lx],
            dy: [-hx, -lx, hx, lx],
            dx: [-hy, hy, -ly, ly],
        }
    }
}

/// Columns `(C*9, h*w)` of mask-modulated bilinear samples.
fn deform_cols<T: Float>(
    g: &DeformGeom,
    x: &[T],
    off: &[T],
    mask: &[T],
    pre: Option<&[[i32; 2]]>,
    cols: &mut [T],
) {
    let (hw, plane) = (g.hw(), g.hr * g.wr);
    for t in 0..TAPS {
        for p in 0..hw {
            let (py, px) = g.location(off, pre, t, p);
            let b = g.corners(py, px);
            let m = mask[t * hw + p];
            for c in 0..g.c {
                let xc = &x[c * plane..(c + 1) * plane];
                let mut v = T::zero();
                for q in 0..4 {
                    if let Some(i) = b.idx[q] {
                        v += b.wt[q] * xc[i];
                    }
                }
                cols[(c * TAPS + t) * hw + p] = m * v;
            }
        }
    }
}

/// Per-sample inputs of a deformable convolution.
pub(crate) struct DeformArgs<'a, T> {
    pub x: &'a [T],
    pub off: &'a [T],
    pub mask: &'a [T],
    pub pre: Option<&'a [[i32; 2]]>,
}

impl<'a, T: Float> DeformArgs<'a, T> {
    pub fn sample(g: &DeformGeom, s: usize, x: &'a [T], off: &'a [T], mask: &'a [T], pre: Option<&'a [[i32; 2]]>) -> Self {
        let hw = g.hw();
        DeformArgs {
            x: &x[s * g.in_len()..(s + 1) * g.in_len()],
            off: &off[s * 2 * TAPS * hw..(s + 1) * 2 * TAPS * hw],
            mask: &mask[s * TAPS * hw..(s + 1) * TAPS * hw],
            pre: pre.map(|p| &p[s * hw..(s + 1) * hw]),
        }
    }
}

pub(crate) fn deform_forward<T: Float>(g: &DeformGeom, a: &DeformArgs<T>, w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let (rows, hw) = (g.c * TAPS, g.hw());
    let mut cols = vec![T::zero(); rows * hw];
    deform_cols(g, a.x, a.off, a.mask, a.pre, &mut cols);
    T::gemm(g.co, rows, hw, w, (rows, 1), &cols, (hw, 1), out, T::zero());
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
        }
    }
}

/// Gradient buffers of one deformable-conv sample; each is optional.
pub(crate) struct DeformGrads<'a, T> {
    pub x: Option<&'a mut [T]>,
    pub off: Option<&'a mut [T]>,
    pub mask: Option<&'a mut [T]>,
    /// Accumulated (`+=`) across samples.
    pub w: Option<&'a mut [T]>,
}

pub(crate) fn deform_backward<T: Float>(g: &DeformGeom, a: &DeformArgs<T>, w: &[T], gy: &[T], out: DeformGrads<T>) {
    let (rows, hw, plane) = (g.c * TAPS, g.hw(), g.hr * g.wr);
    if let Some(gw) = out.w {
        let mut cols = vec![T::zero(); rows * hw];
        deform_cols(g, a.x, a.off, a.mask, a.pre, &mut cols);
        T::gemm(g.co, hw, rows, gy, (hw, 1), &cols, (1, hw), gw, T::one());
    }
    let (mut gx, mut goff, mut gmask) = (out.x, out.off, out.mask);
    if gx.is_none() && goff.is_none() && gmask.is_none() {
        return;
    }
    let mut gcols = vec![T::zero(); rows * hw];
    T::gemm(rows, g.co, hw, w, (1, rows), gy, (hw, 1), &mut gcols, T::zero());
    for t in 0..TAPS {
        for p in 0..hw {
            let (py, px) = g.location(a.off, a.pre, t, p);
            let b = g.corners(py, px);
            let m = a.mask[t * hw + p];
            let (mut sm, mut sy, mut sx) = (T::zero(), T::zero(), T::zero());
            for c in 0..g.c {
                let gc = gcols[(c * TAPS + t) * hw + p];
                if gc == T::zero() {
                    continue;
                }
                let xc = &a.x[c * plane..(c + 1) * plane];
                let (mut v, mut vy, mut vx) = (T::zero(), T::zero(), T::zero());
                for q in 0..4 {
                    if let Some(i) = b.idx[q] {
                        v += b.wt[q] * xc[i];
                        vy += b.dy[q] * xc[i];
                        vx += b.dx[q] * xc[i];
                    }
                }
                sm += gc * v;
                sy += gc * vy;
                sx += gc * vx;
                if let Some(gx) = gx.as_deref_mut() {
                    let gv = gc * m;
                    for q in 0..4 {
                        if let Some(i) = b.idx[q] {
                            gx[c * plane + i] += gv * b.wt[q];
                        }
                    }
                }
            }
            if let Some(gm) = gmask.as_deref_mut() {
                gm[t * hw + p] += sm;
            }
            if let Some(go) = goff.as_deref_mut() {
                go[(2 * t) * hw + p] += m * sy;
                go[(2 * t + 1) * hw + p] += m * sx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.co * g.ho * g.wo];
        for o in 0..g.co {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for c in 0..g.ci {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += w[((o * g.ci + c) * g.k + ky) * g.k + kx]
                                    * x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 2, 1)] {
            let g = ConvGeom::new(2, 7, 6, 3, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..g.w_len()).map(|i| ((i * 13) % 7) as f64 * 0.25 - 0.7).collect();
            let got = conv_forward(&g, 1, &x, &w, false, None);
            for (a, b) in got.iter().zip(naive_conv(&x, &w, &g)) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn integer_offsets_reduce_to_shifted_conv() {
        // zero residual offsets, unit mask, zero pre-offsets: a plain 3x3 conv
        let g = DeformGeom { c: 2, hr: 5, wr: 6, co: 2, h: 5, w: 6 };
        let x: Vec<f64> = (0..g.in_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..2 * 2 * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let off = vec![0.0; 18 * 30];
        let mask = vec![1.0; 9 * 30];
        let mut out = vec![0.0; 2 * 30];
        deform_forward(&g, &DeformArgs { x: &x, off: &off, mask: &mask, pre: None }, &w, None, &mut out);
        let cg = ConvGeom::new(2, 5, 6, 2, 3, 1, 1).unwrap();
        let want = naive_conv(&x, &w, &cg);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

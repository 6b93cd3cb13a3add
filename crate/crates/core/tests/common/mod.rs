//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrsr::matching::{CorrespondenceMap, FeatureMap};

pub fn random_features(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
    FeatureMap::new(c, h, w, data).unwrap()
}

/// `dst[c, y, x] = src[c, (y + dy) mod h, (x + dx) mod w]`.
pub fn roll(f: &FeatureMap, dy: usize, dx: usize) -> FeatureMap {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let mut data = vec![0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(ch * h + y) * w + x] = f.at(ch, (y + dy) % h, (x + dx) % w);
            }
        }
    }
    FeatureMap::new(c, h, w, data).unwrap()
}

fn unit_patch(f: &FeatureMap, y: usize, x: usize, patch: usize) -> Vec<f64> {
    let half = (patch / 2) as i64;
    let mut v = Vec::with_capacity(patch * patch * f.channels());
    for ky in 0..patch as i64 {
        for kx in 0..patch as i64 {
            for c in 0..f.channels() {
                v.push(f.at_clamped(c, y as i64 + ky - half, x as i64 + kx - half) as f64);
            }
        }
    }
    let norm = v.iter().fold(0.0, |acc, a| acc + a * a).sqrt();
    if norm > 1e-12 {
        v.iter_mut().for_each(|a| *a /= norm);
    } else {
        v.iter_mut().for_each(|a| *a = 0.0);
    }
    v
}

/// Exhaustive normalized cross-correlation, recomputing both patches for
/// every candidate and scanning candidates in reverse order. Ties go to the
/// smaller displacement, then to the lexicographically smaller offset.
pub fn brute_match(lr: &FeatureMap, reference: &FeatureMap, patch: usize) -> CorrespondenceMap {
    let (h, w, rh, rw) = (lr.height(), lr.width(), reference.height(), reference.width());
    let mut offsets = Vec::new();
    let mut scores = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, i64, i64)> = None;
            for qy in (0..rh).rev() {
                for qx in (0..rw).rev() {
                    let a = unit_patch(lr, y, x, patch);
                    let b = unit_patch(reference, qy, qx, patch);
                    let mut s = 0.0f64;
                    for i in 0..a.len() {
                        s += a[i] * b[i];
                    }
                    let (dy, dx) = (qy as i64 - y as i64, qx as i64 - x as i64);
                    let wins = match best {
                        None => true,
                        Some((bs, by, bx)) => {
                            s > bs || (s == bs && (dy * dy + dx * dx, dy, dx) < (by * by + bx * bx, by, bx))
                        }
                    };
                    if wins {
                        best = Some((s, dy, dx));
                    }
                }
            }
            let (s, dy, dx) = best.expect("non-empty reference");
            offsets.push([dy as i32, dx as i32]);
            scores.push(s as f32);
        }
    }
    CorrespondenceMap {
        height: h,
        width: w,
        ref_height: rh,
        ref_width: rw,
        offsets,
        scores,
    }
}

pub struct GradientAudit {
    pub checked: usize,
    pub within: usize,
    /// Entries whose plain central difference at the first step agrees.
    pub strict: usize,
    /// Worst best-estimate relative error over the checked entries.
    pub worst: f64,
    /// Parameters whose analytic gradient is exactly zero.
    pub silent: Vec<String>,
    /// `(parameter, analytic, nearest estimate)` for entries outside tolerance.
    pub misses: Vec<(String, f64, f64)>,
}

/// Finite differences of the full two-pass objective against the analytic
/// gradient, in f64, on the tiny network (alignment stacks on) with a
/// 16x16 LR input.
///
/// The objective is only piecewise smooth: the L1 terms and leaky ReLUs
/// have kinks wherever a residual or pre-activation crosses zero, and with
/// tens of thousands of them some entry always has one within a step of the
/// base point. Each entry therefore gets central, forward and backward
/// differences at several steps; a correct derivative agrees with the
/// kink-free side, a wrong one with none of them. The argmax matches are
/// pinned to the base point's. Relative errors are floored at a millionth
/// of the objective, the level where f64 roundoff takes over.
pub fn gradient_audit(per_tensor: usize, tol: f64, seed: u64) -> GradientAudit {
    use rrsr::data::{make_train_sample, synthetic::desk_pairs, SampleOptions};
    use rrsr::geometry::PerturbationRange;
    use rrsr::network::{NetworkConfig, RefSr};
    use rrsr::tensor::ParamStore;
    use rrsr::training::{rtrr_step_pinned, Batch, Extras, LossWeights, RtrrGradient, StepOptions};

    const STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let model = RefSr::new(&NetworkConfig { enable_pfa: true, ..NetworkConfig::tiny() }, &mut store, &mut rng).unwrap();
    let opts = SampleOptions { patch: 64, augment: false, crop_reference: false };
    let samples: Vec<_> = desk_pairs(1, 64, seed)
        .iter()
        .map(|(hr, r)| make_train_sample(hr, r, &mut rng, opts).unwrap())
        .collect();
    let range = PerturbationRange::new(1.25, 5.0).unwrap();
    let batch: Batch<f64> = Batch::build(&samples, Some(range), &mut rng).unwrap();
    let o = StepOptions {
        weights: LossWeights::rec_only(),
        enable_rtrr: true,
        gradient: RtrrGradient::Full,
    };
    let step = |s: &ParamStore<f64>, m| rtrr_step_pinned(&model, s, &batch, &o, &Extras::default(), 1, m).unwrap();
    let base = step(&store, None);
    let f0 = base.objective;
    let floor = 1e-6 * f0.abs();
    let mut audit = GradientAudit { checked: 0, within: 0, strict: 0, worst: 0.0, silent: Vec::new(), misses: Vec::new() };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let Some(grad) = base.grads[id.index()].clone().filter(|g| g.data().iter().any(|&v| v != 0.0)) else {
            audit.silent.push(store.name(id).to_owned());
            continue;
        };
        let n = grad.numel();
        for _ in 0..per_tensor.min(n) {
            let j = rng.gen_range(0..n);
            let orig = store.get(id).data()[j];
            let mut at = |d: f64| {
                store.get_mut(id).data_mut()[j] = orig + d;
                let f = step(&store, Some(&base.matches)).objective;
                store.get_mut(id).data_mut()[j] = orig;
                f
            };
            let analytic = grad.data()[j];
            let mut best = (f64::INFINITY, f64::NAN);
            let rel = |est: f64| (analytic - est).abs() / analytic.abs().max(est.abs()).max(floor);
            for (k, h) in STEPS.into_iter().enumerate() {
                let (plus, minus) = (at(h), at(-h));
                let central = (plus - minus) / (2.0 * h);
                if k == 0 && rel(central) <= tol {
                    audit.strict += 1;
                }
                for est in [central, (plus - f0) / h, (f0 - minus) / h] {
                    let rel = rel(est);
                    if rel < best.0 {
                        best = (rel, est);
                    }
                }
                if best.0 <= tol {
                    break;
                }
            }
            audit.checked += 1;
            audit.worst = audit.worst.max(best.0);
            if best.0 <= tol {
                audit.within += 1;
            } else {
                audit.misses.push((store.name(id).to_owned(), analytic, best.1));
            }
        }
    }
    audit
}

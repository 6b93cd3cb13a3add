//! Losses, the reciprocal two-pass step, optimizers and the training loop.
//!
//! Pass one super-resolves the target from the reference. Pass two then
//! super-resolves a perspective-warped copy of the reference, using the
//! pass-one output as its reference, with the same parameters. Both L1
//! terms are summed and differentiated together, so the second pass pushes
//! gradient back through `X_SR` into the first.

mod adam;
pub mod adversarial;
pub mod perceptual;
mod trainer;

pub use adam::Adam;
pub use adversarial::{critic_loss, generator_loss, gradient_penalty, ConvCritic, Critic, LinearCritic};
pub use perceptual::{frobenius_distance, FeatureExtractor};
pub use trainer::{
    load_model, read_metrics, stored_config, MetricsRecord, Trainer, TrainerData, LAST_CHECKPOINT, METRICS_FILE,
    RESOLVED_CONFIG_FILE,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrainSample;
use crate::error::{Error, Result};
use crate::geometry::{make_perspective_pair, PerturbationRange};
use crate::matching::CorrespondenceMap;
use crate::network::{images_to_tensor, RefSr};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Weights of the four loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_rtrr: f64,
    pub lambda_per: f64,
    pub lambda_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rec: 1.0,
            lambda_rtrr: 0.4,
            lambda_per: 1e-4,
            lambda_adv: 1e-6,
        }
    }
}

impl LossWeights {
    /// Reconstruction and reciprocal terms only.
    pub fn rec_only() -> Self {
        LossWeights {
            lambda_per: 0.0,
            lambda_adv: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("losses.lambda_rec", self.lambda_rec),
            ("losses.lambda_rtrr", self.lambda_rtrr),
            ("losses.lambda_per", self.lambda_per),
            ("losses.lambda_adv", self.lambda_adv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub rec: f32,
    pub rtrr: f32,
    pub per: f32,
    pub adv: f32,
    pub total: f32,
}

impl LossBundle {
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.lambda_rec * self.rec as f64
            + w.lambda_rtrr * self.rtrr as f64
            + w.lambda_per * self.per as f64
            + w.lambda_adv * self.adv as f64
    }

    pub fn is_finite(&self) -> bool {
        [self.rec, self.rtrr, self.per, self.adv, self.total].iter().all(|v| v.is_finite())
    }
}

/// How the pass-two reference relates to the pass-one output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RtrrGradient {
    /// Gradient of the reciprocal term flows back into pass one.
    Full,
    /// Pass two sees the values of `X_SR` only.
    Detached,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub enable_rtrr: bool,
    pub gradient: RtrrGradient,
}

/// Mean absolute error; shapes must agree.
pub fn reconstruction_loss<T: Float>(g: &mut Graph<T>, x_sr: Var, x_hr: Var) -> Result<Var> {
    if g.shape(x_sr) != g.shape(x_hr) {
        return Err(Error::invalid(format!(
            "reconstruction shapes differ: {:?} vs {:?}",
            g.shape(x_sr),
            g.shape(x_hr)
        )));
    }
    Ok(g.l1(x_sr, x_hr))
}

/// Independent RNG for one `(seed, iteration, slot)` triple, so every
/// random draw is a pure function of where it happens in training.
pub fn stream(seed: u64, iteration: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration.wrapping_mul(16).wrapping_add(slot));
    rng
}

/// Stacked tensors for one step.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x_lr: Tensor<T>,
    pub x_hr: Tensor<T>,
    pub y_hr: Tensor<T>,
    /// Pass-two input and target: the warped `(Y_LR, Y_HR)` with the
    /// perspective transform, the raw pair without it.
    pub lr2: Tensor<T>,
    pub hr2: Tensor<T>,
}

impl<T: Float> Batch<T> {
    pub fn build<R: Rng + ?Sized>(
        samples: &[TrainSample],
        perspective: Option<PerturbationRange>,
        rng: &mut R,
    ) -> Result<Self> {
        let stack = |f: &dyn Fn(&TrainSample) -> &crate::imaging::ImageBuffer| {
            images_to_tensor(&samples.iter().map(f).collect::<Vec<_>>())
        };
        let (lr2, hr2) = match perspective {
            Some(range) => {
                let pairs = samples
                    .iter()
                    .map(|s| make_perspective_pair(&s.y_lr, &s.y_hr, rng, range))
                    .collect::<Result<Vec<_>>>()?;
                (
                    images_to_tensor(&pairs.iter().map(|p| &p.lr_warped).collect::<Vec<_>>())?,
                    images_to_tensor(&pairs.iter().map(|p| &p.hr_warped).collect::<Vec<_>>())?,
                )
            }
            None => (stack(&|s| &s.y_lr)?, stack(&|s| &s.y_hr)?),
        };
        Ok(Batch {
            x_lr: stack(&|s| &s.x_lr)?,
            x_hr: stack(&|s| &s.x_hr)?,
            y_hr: stack(&|s| &s.y_hr)?,
            lr2,
            hr2,
        })
    }
}

/// Optional pass-one terms.
pub struct Extras<'a, T> {
    pub perceptual: Option<&'a FeatureExtractor<T>>,
    pub critic: Option<(&'a ConvCritic, &'a ParamStore<T>)>,
}

impl<T> Default for Extras<'_, T> {
    fn default() -> Self {
        Extras {
            perceptual: None,
            critic: None,
        }
    }
}

/// Structural facts about one step's data flow.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StepAudit {
    pub passes: usize,
    /// The pass-two reference carries the values of `X_SR`.
    pub pass2_reference_is_sr: bool,
    /// The pass-two reference is the `X_SR` node itself.
    pub pass2_reference_on_tape: bool,
    /// Both passes read exactly the same parameters.
    pub shared_params: bool,
    pub params_pass1: Vec<ParamId>,
}

pub struct StepOutput<T> {
    pub losses: LossBundle,
    /// The total at full precision, for finite-difference checks.
    pub objective: f64,
    /// Indexed by parameter id; `None` where no gradient reached.
    pub grads: Vec<Option<Tensor<T>>>,
    pub audit: StepAudit,
    pub x_sr: Tensor<T>,
    pub matches: Matches,
}

/// The discrete correspondences a step used, one map per batch item and
/// pass. `pass2` is empty when the reciprocal pass is off.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matches {
    pub pass1: Vec<CorrespondenceMap>,
    pub pass2: Vec<CorrespondenceMap>,
}

/// One forward/backward over the combined objective.
pub fn rtrr_step<T: Float>(
    model: &RefSr,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    opts: &StepOptions,
    extras: &Extras<'_, T>,
    iteration: u64,
) -> Result<StepOutput<T>> {
    rtrr_step_pinned(model, store, batch, opts, extras, iteration, None)
}

/// [`rtrr_step`] with the argmax correspondences optionally held fixed.
/// The objective is piecewise smooth in the parameters, with pieces
/// indexed by the matches; pinning them selects one piece, which is what a
/// finite-difference check has to compare against.
pub fn rtrr_step_pinned<T: Float>(
    model: &RefSr,
    store: &ParamStore<T>,
    batch: &Batch<T>,
    opts: &StepOptions,
    extras: &Extras<'_, T>,
    iteration: u64,
    pinned: Option<&Matches>,
) -> Result<StepOutput<T>> {
    let w = opts.weights;
    let mut g = Graph::new();
    let corr1 = match pinned {
        Some(m) => m.pass1.clone(),
        None => model.correspond(store, &batch.x_lr, &batch.y_hr)?,
    };
    let mut corr2 = Vec::new();
    let x_lr = g.constant(batch.x_lr.clone());
    let y_hr = g.constant(batch.y_hr.clone());
    let x_hr = g.constant(batch.x_hr.clone());
    let x_sr = model.forward(&mut g, store, x_lr, y_hr, &corr1)?;
    let params_pass1 = g.take_touched(store);
    let rec = reconstruction_loss(&mut g, x_sr, x_hr)?;
    let mut audit = StepAudit {
        passes: 1,
        params_pass1,
        ..StepAudit::default()
    };
    let mut terms = vec![(rec, w.lambda_rec)];

    let rtrr = if opts.enable_rtrr {
        let reference = match opts.gradient {
            RtrrGradient::Full => x_sr,
            RtrrGradient::Detached => g.detach(x_sr),
        };
        corr2 = match pinned {
            Some(m) => m.pass2.clone(),
            None => model.correspond(store, &batch.lr2, g.value(reference))?,
        };
        let lr2 = g.constant(batch.lr2.clone());
        let hr2 = g.constant(batch.hr2.clone());
        let y_sr = model.forward(&mut g, store, lr2, reference, &corr2)?;
        let params_pass2 = g.take_touched(store);
        audit.passes = 2;
        audit.pass2_reference_is_sr = g.value(reference) == g.value(x_sr);
        audit.pass2_reference_on_tape = reference == x_sr;
        audit.shared_params = params_pass2 == audit.params_pass1;
        let l = reconstruction_loss(&mut g, y_sr, hr2)?;
        terms.push((l, w.lambda_rtrr));
        Some(l)
    } else {
        None
    };

    let per = if w.lambda_per > 0.0 {
        let ext = extras.perceptual.ok_or_else(|| {
            Error::FeatureExtractorMissing("perceptual weight is positive but no extractor is configured".into())
        })?;
        let l = ext.loss(&mut g, x_sr, x_hr);
        terms.push((l, w.lambda_per));
        Some(l)
    } else {
        None
    };

    let adv = if w.lambda_adv > 0.0 {
        let (critic, cstore) = extras
            .critic
            .ok_or_else(|| Error::invalid("adversarial weight is positive but no critic is configured"))?;
        let l = generator_loss(critic, &mut g, cstore, x_sr);
        terms.push((l, w.lambda_adv));
        Some(l)
    } else {
        None
    };

    let mut total = None;
    for (v, lambda) in terms {
        let scaled = g.scale(v, lambda);
        total = Some(match total {
            None => scaled,
            Some(t) => g.add(t, scaled),
        });
    }
    let total = total.expect("reconstruction term always present");
    let scalar = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].f64() as f32);
    let losses = LossBundle {
        rec: scalar(&g, Some(rec)),
        rtrr: scalar(&g, rtrr),
        per: scalar(&g, per),
        adv: scalar(&g, adv),
        total: scalar(&g, Some(total)),
    };
    if !losses.is_finite() {
        return Err(Error::Divergence {
            iteration,
            detail: format!(
                "non-finite loss (rec {}, rtrr {}, per {}, adv {})",
                losses.rec, losses.rtrr, losses.per, losses.adv
            ),
        });
    }
    let objective = g.value(total).data()[0].f64();
    let gradients = g.backward(total);
    let grads = store.ids().map(|id| gradients.param(store, id).cloned()).collect();
    Ok(StepOutput {
        losses,
        objective,
        grads,
        audit,
        x_sr: g.value(x_sr).clone(),
        matches: Matches { pass1: corr1, pass2: corr2 },
    })
}

/// Flattened gradient, zeros where a slot is empty.
pub fn flatten_grads<T: Float>(store: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.count());
    for (id, _, p) in store.iter() {
        match &grads[id.index()] {
            Some(g) => out.extend(g.data().iter().map(|v| v.f64())),
            None => out.extend(std::iter::repeat_n(0.0, p.numel())),
        }
    }
    out
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

#[cfg(test)]
mod tests;

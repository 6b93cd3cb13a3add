//! The reference-based SR model: content extractor, reference pyramid
//! encoder, FAS blocks stacked progressively at 2x and 4x, and a
//! reconstruction head.

mod blocks;
mod layers;

pub use blocks::{ContentExtractor, Fas, FeaturePyramid, Mdcn, ReferenceEncoder, Selection, Upsampler};
pub use layers::{Conv, ResBlock};

use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::geometry::SR_SCALE;
use crate::imaging::{bicubic_resize, ColorSpace, ImageBuffer, Scale, ValueRange};
use crate::matching::{scale_offsets, CorrespondenceMap, CorrespondenceProvider, FeatureMap, NccMatcher};
use crate::tensor::{Float, Graph, ParamStore, Shifts, Tensor, Var};
use layers::{Builder, SLOPE};

/// Feature space used to compute pre-offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchFeatures {
    /// LR pixels against the reference downscaled by 4.
    Pixels,
    /// Coarsest encoder features of the upscaled LR against those of the
    /// reference.
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Trainable,
    /// Weights loaded from `encoder_weights` and held fixed.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub channels: usize,
    pub content_resblocks: usize,
    pub n_resblocks: usize,
    pub num_kernels: usize,
    pub stacks_per_scale: usize,
    pub enable_ras: bool,
    pub enable_pfa: bool,
    pub offset_head_layers: usize,
    pub match_features: MatchFeatures,
    pub match_patch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_radius: Option<usize>,
    pub encoder: EncoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_weights: Option<PathBuf>,
    /// Add a bicubic upscale of the input to the reconstruction.
    pub global_skip: bool,
}

impl NetworkConfig {
    pub fn full() -> Self {
        NetworkConfig {
            channels: 64,
            content_resblocks: 16,
            n_resblocks: 5,
            num_kernels: 16,
            stacks_per_scale: 3,
            enable_ras: true,
            enable_pfa: true,
            offset_head_layers: 2,
            match_features: MatchFeatures::Pixels,
            match_patch: 3,
            match_radius: None,
            encoder: EncoderKind::Trainable,
            encoder_weights: None,
            global_skip: false,
        }
    }

    pub fn desk() -> Self {
        NetworkConfig {
            channels: 8,
            content_resblocks: 1,
            n_resblocks: 1,
            num_kernels: 4,
            global_skip: true,
            ..Self::full()
        }
    }

    /// The tiny configuration used by gradient audits.
    pub fn tiny() -> Self {
        NetworkConfig {
            channels: 8,
            content_resblocks: 1,
            n_resblocks: 1,
            num_kernels: 2,
            enable_pfa: false,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("network.channels", self.channels),
            ("network.n_resblocks", self.n_resblocks),
            ("network.num_kernels", self.num_kernels),
            ("network.stacks_per_scale", self.stacks_per_scale),
            ("network.offset_head_layers", self.offset_head_layers),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.match_patch.is_multiple_of(2) {
            return Err(Error::config("network.match_patch", "must be odd"));
        }
        if self.encoder == EncoderKind::Frozen && self.encoder_weights.is_none() {
            return Err(Error::config(
                "network.encoder_weights",
                "a frozen encoder needs a weights file",
            ));
        }
        Ok(())
    }

    /// FAS blocks at each of the 2x and 4x scales.
    pub fn stacks(&self) -> usize {
        if self.enable_pfa {
            self.stacks_per_scale
        } else {
            1
        }
    }
}

/// Stacks Unit-range RGB images of equal size into `(N, 3, H, W)`.
pub fn images_to_tensor<T: Float>(imgs: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = imgs.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(imgs.len() * 3 * h * w);
    for img in imgs {
        if img.color() != ColorSpace::Rgb {
            return Err(Error::InvalidColorSpace {
                expected: "rgb",
                actual: img.color().name(),
            });
        }
        if img.dims() != (h, w) {
            return Err(Error::invalid(format!(
                "batch mixes {h}x{w} and {}x{} images",
                img.height(),
                img.width()
            )));
        }
        let img = img.to_range(ValueRange::Unit);
        for c in 0..3 {
            data.extend(img.data().iter().skip(c).step_by(3).map(|&v| T::c(v as f64)));
        }
    }
    Ok(Tensor::from_vec(&[imgs.len(), 3, h, w], data))
}

/// Sample `i` of an `(N, 3, H, W)` tensor as a Unit-range RGB image
/// (values clamped to `[0, 1]`).
pub fn tensor_to_image<T: Float>(t: &Tensor<T>, i: usize) -> Result<ImageBuffer> {
    let (_, c, h, w) = t.dims4();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let base = i * 3 * plane;
    let d = t.data();
    ImageBuffer::from_fn(h, w, ColorSpace::Rgb, ValueRange::Unit, |y, x, ch| {
        d[base + ch * plane + y * w + x].f64() as f32
    })
}

fn resize_batch<T: Float>(t: &Tensor<T>, scale: Scale) -> Result<Tensor<T>> {
    let imgs = (0..t.shape()[0])
        .map(|i| tensor_to_image(t, i).and_then(|img| bicubic_resize(&img, scale)))
        .collect::<Result<Vec<_>>>()?;
    images_to_tensor(&imgs.iter().collect::<Vec<_>>())
}

fn feature_map<T: Float>(t: &Tensor<T>, i: usize) -> Result<FeatureMap> {
    let (_, c, h, w) = t.dims4();
    let per = c * h * w;
    FeatureMap::new(c, h, w, t.data()[i * per..(i + 1) * per].iter().map(|v| v.f64() as f32).collect())
}

fn shifts_at(corr: &[CorrespondenceMap], s: usize) -> Result<Shifts> {
    let mut out = Vec::new();
    for m in corr {
        out.extend_from_slice(&scale_offsets(m, s)?.offsets);
    }
    Ok(Arc::from(out))
}

/// Parameter layout and forward pass of the full model.
#[derive(Clone, Debug)]
pub struct RefSr {
    cfg: NetworkConfig,
    content: ContentExtractor,
    encoder: ReferenceEncoder,
    fas1: Fas,
    up1: Upsampler,
    fas2: Vec<Fas>,
    up2: Upsampler,
    fas4: Vec<Fas>,
    rec_a: Conv,
    rec_b: Conv,
}

impl RefSr {
    /// Registers every parameter in `store`. A frozen encoder is loaded from
    /// its weights file and marked non-trainable.
    pub fn new<T: Float, R: Rng + ?Sized>(cfg: &NetworkConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let kernels = cfg.enable_ras.then_some(cfg.num_kernels);
        let mut b = Builder { store, rng };
        let content = ContentExtractor::build(&mut b, c, cfg.content_resblocks);
        let encoder = ReferenceEncoder::build(&mut b, c);
        let fas = |b: &mut Builder<T, R>, name: String| {
            Fas::build(b, &name, c, cfg.n_resblocks, kernels, cfg.offset_head_layers)
        };
        let fas1 = fas(&mut b, "fas1".into());
        let up1 = Upsampler::build(&mut b, "up1", c);
        let fas2 = (0..cfg.stacks()).map(|i| fas(&mut b, format!("fas2.{i}"))).collect();
        let up2 = Upsampler::build(&mut b, "up2", c);
        let fas4 = (0..cfg.stacks()).map(|i| fas(&mut b, format!("fas4.{i}"))).collect();
        let rec_a = b.conv3("rec.a", c, c);
        let rec_b = b.conv("rec.b", c, 3, 3, 1, 0.1);
        let model = RefSr {
            cfg: cfg.clone(),
            content,
            encoder,
            fas1,
            up1,
            fas2,
            up2,
            fas4,
            rec_a,
            rec_b,
        };
        if cfg.encoder == EncoderKind::Frozen {
            let path = cfg.encoder_weights.as_ref().expect("validated");
            let archive = Archive::load(path)?;
            for id in model.encoder.params() {
                let key = format!("model/{}", store.name(id));
                let t = archive
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))?;
                if t.shape() != store.get(id).shape() {
                    return Err(Error::Checkpoint(format!("{}: `{key}` has the wrong shape", path.display())));
                }
                store.set(id, t.cast());
                store.set_trainable(id, false);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn content(&self) -> &ContentExtractor {
        &self.content
    }

    pub fn encoder(&self) -> &ReferenceEncoder {
        &self.encoder
    }

    /// All FAS blocks in execution order.
    pub fn fas_blocks(&self) -> Vec<&Fas> {
        std::iter::once(&self.fas1).chain(&self.fas2).chain(&self.fas4).collect()
    }

    /// Pre-offsets for every sample, from tensor values only.
    pub fn correspond<T: Float>(
        &self,
        store: &ParamStore<T>,
        x_lr: &Tensor<T>,
        reference: &Tensor<T>,
    ) -> Result<Vec<CorrespondenceMap>> {
        let (n, _, h, w) = x_lr.dims4();
        let (rn, _, rh, rw) = reference.dims4();
        if rn != n {
            return Err(Error::invalid(format!("{n} inputs but {rn} references")));
        }
        if rh % SR_SCALE != 0 || rw % SR_SCALE != 0 {
            return Err(Error::invalid(format!("reference {rh}x{rw} is not divisible by 4")));
        }
        let (lr_feats, ref_feats) = match self.cfg.match_features {
            MatchFeatures::Pixels => (x_lr.clone(), resize_batch(reference, Scale::down(4))?),
            MatchFeatures::Encoder => {
                let up = resize_batch(x_lr, Scale::up(4))?;
                let mut g = Graph::inference();
                let (a, b) = (g.constant(up), g.constant(reference.clone()));
                let pa = self.encoder.forward(&mut g, store, a)?;
                let pb = self.encoder.forward(&mut g, store, b)?;
                (g.value(pa.f1).clone(), g.value(pb.f1).clone())
            }
        };
        debug_assert_eq!(lr_feats.dims4().2, h);
        debug_assert_eq!(lr_feats.dims4().3, w);
        let matcher = NccMatcher {
            patch: self.cfg.match_patch,
            radius: self.cfg.match_radius,
        };
        (0..n)
            .map(|i| matcher.correspond(&feature_map(&lr_feats, i)?, &feature_map(&ref_feats, i)?))
            .collect()
    }

    /// Unclamped SR output `(N, 3, 4H, 4W)`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_lr: Var,
        reference: Var,
        corr: &[CorrespondenceMap],
    ) -> Result<Var> {
        let (n, _, h, w) = g.value(x_lr).dims4();
        let (_, _, rh, rw) = g.value(reference).dims4();
        if corr.len() != n {
            return Err(Error::invalid(format!("{} correspondence maps for {n} samples", corr.len())));
        }
        for m in corr {
            if (m.height, m.width, m.ref_height * SR_SCALE, m.ref_width * SR_SCALE) != (h, w, rh, rw) {
                return Err(Error::invalid("correspondence map does not fit the input/reference sizes"));
            }
        }
        let pyr = self.encoder.forward(g, store, reference)?;
        let (pre1, pre2, pre4) = (shifts_at(corr, 1)?, shifts_at(corr, 2)?, shifts_at(corr, 4)?);
        let mut f = self.content.forward(g, store, x_lr);
        f = self.fas1.forward(g, store, f, pyr.f1, &pre1)?;
        f = self.up1.forward(g, store, f);
        for fas in &self.fas2 {
            f = fas.forward(g, store, f, pyr.f2, &pre2)?;
        }
        f = self.up2.forward(g, store, f);
        for fas in &self.fas4 {
            f = fas.forward(g, store, f, pyr.f4, &pre4)?;
        }
        let out = self.rec_a.forward(g, store, f);
        let out = g.leaky_relu(out, SLOPE);
        let mut out = self.rec_b.forward(g, store, out);
        if self.cfg.global_skip {
            let up = resize_batch(g.value(x_lr), Scale::up(4))?;
            let up = g.constant(up);
            out = g.add(out, up);
        }
        Ok(out)
    }

    /// Clamped single-image inference.
    pub fn infer<T: Float>(&self, store: &ParamStore<T>, lr: &ImageBuffer, reference: &ImageBuffer) -> Result<ImageBuffer> {
        let x = images_to_tensor::<T>(&[lr])?;
        let y = images_to_tensor::<T>(&[reference])?;
        let corr = self.correspond(store, &x, &y)?;
        let mut g = Graph::inference();
        let (xv, yv) = (g.constant(x), g.constant(y));
        let out = self.forward(&mut g, store, xv, yv, &corr)?;
        tensor_to_image(g.value(out), 0)
    }
}

#[cfg(test)]
mod tests;

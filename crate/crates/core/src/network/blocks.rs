use rand::Rng;

use super::layers::{run_blocks, Builder, Conv, ResBlock, SLOPE};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, ParamId, ParamStore, Shifts, Var};

/// One conv followed by residual blocks, on the LR input.
#[derive(Clone, Debug)]
pub struct ContentExtractor {
    head: Conv,
    blocks: Vec<ResBlock>,
}

impl ContentExtractor {
    pub(crate) fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<T, R>, c: usize, n_blocks: usize) -> Self {
        ContentExtractor {
            head: b.conv3("content.head", 3, c),
            blocks: b.resblocks("content.res", c, n_blocks),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.head.forward(g, store, x);
        let h = g.leaky_relu(h, SLOPE);
        run_blocks(&self.blocks, g, store, h)
    }
}

/// Reference features at 1x, 2x and 4x of the LR grid.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub f1: Var,
    pub f2: Var,
    pub f4: Var,
}

/// Trainable pyramid encoder: two full-resolution convs, then two stride-2
/// reductions.
#[derive(Clone, Debug)]
pub struct ReferenceEncoder {
    full_a: Conv,
    full_b: Conv,
    half: Conv,
    quarter: Conv,
}

impl ReferenceEncoder {
    pub(crate) fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<T, R>, c: usize) -> Self {
        ReferenceEncoder {
            full_a: b.conv3("encoder.full_a", 3, c),
            full_b: b.conv3("encoder.full_b", c, c),
            half: b.conv("encoder.half", c, c, 3, 2, 1.0),
            quarter: b.conv("encoder.quarter", c, c, 3, 2, 1.0),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.full_a, &self.full_b, &self.half, &self.quarter]
            .iter()
            .flat_map(|c| [Some(c.weight()), c.bias()])
            .flatten()
            .collect()
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y: Var) -> Result<FeaturePyramid> {
        let (_, _, h, w) = g.value(y).dims4();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "reference {h}x{w} is not divisible by 4"
            )));
        }
        let mut f = self.full_a.forward(g, store, y);
        f = g.leaky_relu(f, SLOPE);
        f = self.full_b.forward(g, store, f);
        let f4 = g.leaky_relu(f, SLOPE);
        let f = self.half.forward(g, store, f4);
        let f2 = g.leaky_relu(f, SLOPE);
        let f = self.quarter.forward(g, store, f2);
        let f1 = g.leaky_relu(f, SLOPE);
        Ok(FeaturePyramid { f1, f2, f4 })
    }
}

/// Modulated deformable alignment driven by integer pre-offsets.
#[derive(Clone, Debug)]
pub struct Mdcn {
    head: Vec<Conv>,
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl Mdcn {
    pub(crate) fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<T, R>, name: &str, c: usize, layers: usize) -> Self {
        let layers = layers.max(1);
        let mut head = Vec::with_capacity(layers);
        let mut cin = 2 * c;
        for i in 0..layers - 1 {
            head.push(b.conv3(&format!("{name}.head{i}"), cin, c));
            cin = c;
        }
        // small but nonzero so residual offsets start near zero while every
        // head parameter still receives gradient
        head.push(b.conv(&format!("{name}.head{}", layers - 1), cin, 27, 3, 1, 0.05));
        let weight = b
            .store
            .add_uniform(format!("{name}.w"), &[c, c, 3, 3], 9 * c, 1.0, b.rng);
        let bias = b.store.add_zeros(format!("{name}.b"), &[c]);
        Mdcn { head, weight, bias }
    }

    /// Residual offsets `(N, 18, H, W)` and masks in `(0, 1)`, `(N, 9, H, W)`.
    pub fn offsets_and_masks<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_lr: Var,
        f_ref: Var,
        pre: &Shifts,
    ) -> (Var, Var) {
        let (_, _, h, w) = g.value(f_lr).dims4();
        let warped = g.shift(f_ref, pre.clone(), (h, w));
        let mut x = g.concat(&[f_lr, warped]);
        let last = self.head.len() - 1;
        for (i, conv) in self.head.iter().enumerate() {
            x = conv.forward(g, store, x);
            if i < last {
                x = g.leaky_relu(x, SLOPE);
            }
        }
        let off = g.narrow(x, 0, 18);
        let logits = g.narrow(x, 18, 9);
        (off, g.sigmoid(logits))
    }

    /// Deformable conv of `f_ref` with explicit offsets and masks.
    pub fn sample<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_ref: Var,
        off: Var,
        mask: Var,
        pre: Option<Shifts>,
    ) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.deform_conv(f_ref, off, mask, w, Some(b), pre)
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_lr: Var,
        f_ref: Var,
        pre: &Shifts,
    ) -> Var {
        let (off, mask) = self.offsets_and_masks(g, store, f_lr, f_ref, pre);
        self.sample(g, store, f_ref, off, mask, Some(pre.clone()))
    }
}

/// Fusion of the merged (aligned reference, LR) features back to `c`
/// channels.
#[derive(Clone, Debug)]
pub enum Selection {
    /// Routing-weighted mixture of `K` template kernels, one conv per sample.
    Ras {
        fc_w: ParamId,
        fc_b: ParamId,
        bank: ParamId,
        bias: ParamId,
    },
    /// Plain 1x1 conv.
    Plain(Conv),
}

impl Selection {
    pub(crate) fn build<T: Float, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        c: usize,
        kernels: Option<usize>,
    ) -> Self {
        match kernels {
            Some(k) => {
                let fc_w = b.store.add_uniform(format!("{name}.fc.w"), &[k, 2 * c], 2 * c, 1.0, b.rng);
                let fc_b = b.store.add_zeros(format!("{name}.fc.b"), &[k]);
                // with gates near 0.5 the mixed kernel sums K templates
                let gain = 2.0 / (k as f64).sqrt();
                let bank = b
                    .store
                    .add_uniform(format!("{name}.bank"), &[k, c, 2 * c, 3, 3], 18 * c, gain, b.rng);
                let bias = b.store.add_zeros(format!("{name}.bias"), &[c]);
                Selection::Ras { fc_w, fc_b, bank, bias }
            }
            None => Selection::Plain(b.conv(&format!("{name}.fuse"), 2 * c, c, 1, 1, 1.0)),
        }
    }

    pub fn is_ras(&self) -> bool {
        matches!(self, Selection::Ras { .. })
    }

    /// Gates `(N, K)` in `(0, 1)`; `None` for the plain variant.
    pub fn routing<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, merged: Var) -> Option<Var> {
        let Selection::Ras { fc_w, fc_b, .. } = self else {
            return None;
        };
        let pooled = g.global_avg_pool(merged);
        let (w, b) = (g.param(store, *fc_w), g.param(store, *fc_b));
        let logits = g.linear(pooled, w, Some(b));
        Some(g.sigmoid(logits))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, merged: Var) -> Result<Var> {
        match self {
            Selection::Plain(conv) => Ok(conv.forward(g, store, merged)),
            Selection::Ras { bank, bias, .. } => {
                let expected = store.get(*bank).shape()[2];
                let got = g.value(merged).dims4().1;
                if got != expected {
                    return Err(Error::invalid(format!(
                        "merged features have {got} channels, filter bank expects {expected}"
                    )));
                }
                let alpha = self.routing(g, store, merged).expect("ras routing");
                let bank = g.param(store, *bank);
                let mixed = g.kernel_mix(alpha, bank);
                let bias = g.param(store, *bias);
                Ok(g.conv2d(merged, mixed, Some(bias), 1, 1))
            }
        }
    }
}

/// Feature alignment and selection: align, merge, select, residual fuse.
#[derive(Clone, Debug)]
pub struct Fas {
    pub mdcn: Mdcn,
    pub select: Selection,
    blocks: Vec<ResBlock>,
}

impl Fas {
    pub(crate) fn build<T: Float, R: Rng + ?Sized>(
        b: &mut Builder<T, R>,
        name: &str,
        c: usize,
        n_blocks: usize,
        kernels: Option<usize>,
        head_layers: usize,
    ) -> Self {
        Fas {
            mdcn: Mdcn::build(b, &format!("{name}.mdcn"), c, head_layers),
            select: Selection::build(b, &format!("{name}.select"), c, kernels),
            blocks: b.resblocks(&format!("{name}.res"), c, n_blocks),
        }
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_lr: Var,
        f_ref: Var,
        pre: &Shifts,
    ) -> Result<Var> {
        let aligned = self.mdcn.forward(g, store, f_lr, f_ref, pre);
        let merged = g.concat(&[aligned, f_lr]);
        let selected = self.select.forward(g, store, merged)?;
        let fused = g.add(f_lr, selected);
        Ok(run_blocks(&self.blocks, g, store, fused))
    }

    /// The residual-block tail alone, for ablation checks.
    pub fn tail<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        run_blocks(&self.blocks, g, store, x)
    }
}

/// Conv to `4c` channels, pixel shuffle by 2, leaky ReLU.
#[derive(Clone, Debug)]
pub struct Upsampler {
    conv: Conv,
}

impl Upsampler {
    pub(crate) fn build<T: Float, R: Rng + ?Sized>(b: &mut Builder<T, R>, name: &str, c: usize) -> Self {
        Upsampler {
            conv: b.conv3(name, c, 4 * c),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.conv.forward(g, store, x);
        let h = g.pixel_shuffle(h, 2);
        g.leaky_relu(h, SLOPE)
    }
}

use rand::Rng;

use crate::tensor::{Float, Graph, ParamId, ParamStore, Var};

pub(crate) const SLOPE: f64 = 0.1;

/// Square-kernel convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub(crate) w: ParamId,
    pub(crate) b: Option<ParamId>,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
}

/// Naming and initialization context while building a model.
pub(crate) struct Builder<'a, T, R: ?Sized> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Float, R: Rng + ?Sized> Builder<'_, T, R> {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> Conv {
        let w = self
            .store
            .add_uniform(format!("{name}.w"), &[cout, cin, k, k], cin * k * k, gain, self.rng);
        let b = Some(self.store.add_zeros(format!("{name}.b"), &[cout]));
        Conv {
            w,
            b,
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv(name, cin, cout, 3, 1, 1.0)
    }

    pub fn resblock(&mut self, name: &str, c: usize) -> ResBlock {
        ResBlock {
            a: self.conv3(&format!("{name}.a"), c, c),
            // small second layer keeps deep residual stacks near identity at init
            b: self.conv(&format!("{name}.b"), c, c, 3, 1, 0.1),
        }
    }

    pub fn resblocks(&mut self, name: &str, c: usize, n: usize) -> Vec<ResBlock> {
        (0..n).map(|i| self.resblock(&format!("{name}.{i}"), c)).collect()
    }
}

impl Conv {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

/// `x + conv(lrelu(conv(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.a.forward(g, store, x);
        let h = g.leaky_relu(h, SLOPE);
        let h = self.b.forward(g, store, h);
        g.add(x, h)
    }
}

pub(crate) fn run_blocks<T: Float>(blocks: &[ResBlock], g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Var {
    for b in blocks {
        x = b.forward(g, store, x);
    }
    x
}

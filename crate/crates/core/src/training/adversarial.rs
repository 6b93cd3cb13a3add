//! WGAN-GP critic and losses.
//!
//! The penalty needs the critic's gradient with respect to its input as a
//! differentiable expression, so each critic spells out its own input
//! gradient in graph ops rather than relying on a second reverse sweep.

use rand::Rng;

use crate::network::Conv;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

const CRITIC_SLOPE: f64 = 0.2;

pub trait Critic<T: Float> {
    /// Scores `(N)` and `d sum(scores) / d x`, shaped like `x`.
    fn score_and_input_gradient(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var);

    fn score(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        self.score_and_input_gradient(g, store, x).0
    }
}

/// Strided-conv critic: conv3, then two stride-2 conv4 stages, global
/// average pooling and a linear read-out.
#[derive(Clone, Debug)]
pub struct ConvCritic {
    convs: [Conv; 3],
    fc_w: ParamId,
}

impl ConvCritic {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, c: usize, rng: &mut R) -> Self {
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize, stride: usize| {
            let w = store.add_uniform(format!("critic.{name}.w"), &[cout, cin, k, k], cin * k * k, 1.0, rng);
            let b = store.add_zeros(format!("critic.{name}.b"), &[cout]);
            Conv {
                w,
                b: Some(b),
                stride,
                pad: 1,
            }
        };
        let convs = [conv("c1", 3, c, 3, 1), conv("c2", c, 2 * c, 4, 2), conv("c3", 2 * c, 4 * c, 4, 2)];
        let fc_w = store.add_uniform("critic.fc.w", &[1, 4 * c], 4 * c, 1.0, rng);
        // no read-out bias: it cancels in every WGAN term
        ConvCritic { convs, fc_w }
    }
}

fn lrelu_slopes<T: Float>(z: &Tensor<T>) -> Tensor<T> {
    let s = T::c(CRITIC_SLOPE);
    z.map(|v| if v > T::zero() { T::one() } else { s })
}

impl<T: Float> Critic<T> for ConvCritic {
    fn score_and_input_gradient(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let n = g.shape(x)[0];
        let mut inputs = Vec::with_capacity(3);
        let mut slopes = Vec::with_capacity(3);
        let mut a = x;
        for conv in &self.convs {
            inputs.push(a);
            let z = conv.forward(g, store, a);
            // lrelu' is piecewise constant, so a constant mask is exact a.e.
            slopes.push(g.constant(lrelu_slopes(g.value(z))));
            a = g.leaky_relu(z, CRITIC_SLOPE);
        }
        let (_, _, h, w) = g.value(a).dims4();
        let pooled = g.global_avg_pool(a);
        let fw = g.param(store, self.fc_w);
        let s = g.linear(pooled, fw, None);
        let score = g.reshape(s, &[n]);

        let rows = g.tile(fw, n);
        let spread = g.spread(rows, h, w);
        let mut grad = g.scale(spread, 1.0 / (h * w) as f64);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let gz = g.mul(grad, slopes[i]);
            let (_, _, ih, iw) = g.value(inputs[i]).dims4();
            let wv = g.param(store, conv.weight());
            grad = g.conv_transpose(gz, wv, conv.stride, conv.pad, (ih, iw));
        }
        (score, grad)
    }
}

/// `D(x) = <w, x>` per sample, for closed-form checks.
#[derive(Clone, Debug)]
pub struct LinearCritic {
    pub w: ParamId,
}

impl<T: Float> Critic<T> for LinearCritic {
    fn score_and_input_gradient(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> (Var, Var) {
        let shape = g.shape(x).to_vec();
        let mut one = shape.clone();
        one[0] = 1;
        let w = g.param(store, self.w);
        let w = g.reshape(w, &one);
        let tiled = g.tile(w, shape[0]);
        let prod = g.mul(x, tiled);
        (g.sum_per_sample(prod), tiled)
    }
}

/// `mean_n (||grad_x D(x_n)|| - 1)^2`.
pub fn gradient_penalty<T: Float>(critic: &impl Critic<T>, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
    let (_, grad) = critic.score_and_input_gradient(g, store, x);
    let sq = g.square(grad);
    let per = g.sum_per_sample(sq);
    let norm = g.sqrt(per);
    let d = g.add_scalar(norm, -1.0);
    let d2 = g.square(d);
    g.mean(d2)
}

/// Generator loss `-E[D(x_sr)]`.
pub fn generator_loss<T: Float>(critic: &impl Critic<T>, g: &mut Graph<T>, store: &ParamStore<T>, x_sr: Var) -> Var {
    let s = critic.score(g, store, x_sr);
    let m = g.mean(s);
    g.scale(m, -1.0)
}

/// Critic loss `E[D(fake)] - E[D(real)] + gp_weight * GP` with the penalty
/// on per-sample convex combinations `eps * real + (1 - eps) * fake`.
pub fn critic_loss<T: Float, R: Rng + ?Sized>(
    critic: &impl Critic<T>,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    fake: &Tensor<T>,
    real: &Tensor<T>,
    gp_weight: f64,
    rng: &mut R,
) -> Var {
    assert_eq!(fake.shape(), real.shape(), "critic inputs must match");
    let n = fake.shape()[0];
    let per = fake.numel() / n;
    let mut mix = fake.clone();
    for s in 0..n {
        let eps = T::c(rng.gen_range(0.0..1.0));
        let rows = &mut mix.data_mut()[s * per..(s + 1) * per];
        for (m, &r) in rows.iter_mut().zip(&real.data()[s * per..(s + 1) * per]) {
            *m = eps * r + (T::one() - eps) * *m;
        }
    }
    let fv = g.constant(fake.clone());
    let rv = g.constant(real.clone());
    let xv = g.constant(mix);
    let sf = critic.score(g, store, fv);
    let sr = critic.score(g, store, rv);
    let (mf, mr) = (g.mean(sf), g.mean(sr));
    let wdist = g.sub(mf, mr);
    let gp = gradient_penalty(critic, g, store, xv);
    let gp = g.scale(gp, gp_weight);
    g.add(wdist, gp)
}

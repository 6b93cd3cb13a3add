use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Tensor};

/// Adam with bias correction. Moments are kept per parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; `grads` is indexed by parameter id, `None` entries and
    /// frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (ob1, ob2) = (T::c(1.0 - self.beta1), T::c(1.0 - self.beta2));
        let (lr, eps) = (T::c(self.lr), T::c(self.eps));
        let (c1, c2) = (T::c(c1), T::c(c2));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn save_into(&self, archive: &mut Archive, prefix: &str, store: &ParamStore<T>) {
        for (id, name, _) in store.iter() {
            archive.push(format!("{prefix}/m/{name}"), &self.m[id.index()]);
            archive.push(format!("{prefix}/v/{name}"), &self.v[id.index()]);
        }
    }

    pub fn load_from(&mut self, archive: &Archive, prefix: &str, store: &ParamStore<T>, t: u64) -> Result<()> {
        for (id, name, p) in store.iter() {
            for (kind, slot) in [("m", &mut self.m[id.index()]), ("v", &mut self.v[id.index()])] {
                let key = format!("{prefix}/{kind}/{name}");
                let val = archive
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor `{key}`")))?;
                if val.shape() != p.shape() {
                    return Err(Error::Checkpoint(format!("optimizer tensor `{key}` has the wrong shape")));
                }
                *slot = val.cast();
            }
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_rolled_reference() {
        let target: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", Tensor::zeros(&[10]));
        let mut adam = Adam::new(&store, 0.05, 0.9, 0.999, 1e-8);

        let (mut p, mut m, mut v) = (vec![0.0f64; 10], vec![0.0f64; 10], vec![0.0f64; 10]);
        for t in 1..=100 {
            // loss = sum (p - target)^4 / 4, gradient (p - target)^3
            let grad: Vec<f64> = store.get(id).data().iter().zip(&target).map(|(a, b)| (a - b).powi(3)).collect();
            adam.step(&mut store, &[Some(Tensor::from_vec(&[10], grad))]);
            for i in 0..10 {
                let g = (p[i] - target[i]).powi(3);
                m[i] = 0.9 * m[i] + 0.1 * g;
                v[i] = 0.999 * v[i] + 0.001 * g * g;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in store.get(id).data().iter().zip(&p) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
        assert_eq!(adam.steps(), 100);
    }

    #[test]
    fn frozen_and_missing_gradients_are_skipped() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::full(&[2], 1.0));
        let b = store.add("b", Tensor::full(&[2], 1.0));
        store.set_trainable(b, false);
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.999, 1e-8);
        let g = Some(Tensor::full(&[2], 1.0));
        adam.step(&mut store, &[None, g]);
        assert_eq!(store.get(a).data(), &[1.0, 1.0]);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }
}

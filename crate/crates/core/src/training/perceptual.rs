//! Feature-space distance under a frozen extractor.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::network::Conv;
use crate::tensor::{Float, Graph, ParamStore, Var};

const PREFIX: &str = "extractor";

/// Two 3x3 convs with leaky ReLU, never trained.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    store: ParamStore<T>,
    convs: Vec<Conv>,
}

impl<T: Float> FeatureExtractor<T> {
    fn layout(store: &mut ParamStore<T>, channels: usize, rng: &mut (impl Rng + ?Sized)) -> Vec<Conv> {
        let mut cin = 3;
        (0..2)
            .map(|i| {
                let w = store.add_uniform(format!("conv{i}.w"), &[channels, cin, 3, 3], 9 * cin, 1.0, rng);
                let b = store.add_zeros(format!("conv{i}.b"), &[channels]);
                cin = channels;
                Conv {
                    w,
                    b: Some(b),
                    stride: 1,
                    pad: 1,
                }
            })
            .collect()
    }

    /// Random weights; useful as a fixed texture descriptor and in tests.
    pub fn random(channels: usize, rng: &mut (impl Rng + ?Sized)) -> Self {
        let mut store = ParamStore::new();
        let convs = Self::layout(&mut store, channels, rng);
        for id in store.ids().collect::<Vec<_>>() {
            store.set_trainable(id, false);
        }
        FeatureExtractor { store, convs }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let w0 = archive
            .get(&format!("{PREFIX}/conv0.w"))
            .ok_or_else(|| Error::FeatureExtractorMissing(format!("archive has no `{PREFIX}/conv0.w`")))?;
        let channels = w0.shape()[0];
        let mut ext = Self::random(channels, &mut ChaCha8Rng::seed_from_u64(0));
        archive
            .load_store(PREFIX, &mut ext.store)
            .map_err(|e| Error::FeatureExtractorMissing(e.to_string()))?;
        Ok(ext)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let archive = Archive::load(path).map_err(|e| Error::FeatureExtractorMissing(format!("{}: {e}", path.display())))?;
        Self::from_archive(&archive)
    }

    pub fn push_into(&self, archive: &mut Archive) {
        archive.push_store(PREFIX, &self.store);
    }

    pub fn features(&self, g: &mut Graph<T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, &self.store, h);
            h = g.leaky_relu(h, 0.2);
        }
        h
    }

    /// `||phi(a) - phi(b)||_F`.
    pub fn loss(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let fa = self.features(g, a);
        let fb = self.features(g, b);
        frobenius_distance(g, fa, fb)
    }
}

pub fn frobenius_distance<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    let s = g.sum(sq);
    g.sqrt(s)
}

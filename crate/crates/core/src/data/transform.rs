//! Feature-space transforms for the Train-DA hook.
//!
//! Support and query sets transform independently; the identity transform
//! is the default, so an untouched pipeline stays bit-stable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::episode::Episode;
use crate::error::{Error, Result};

pub trait FeatureTransform {
    fn apply(&self, sample: &mut Vec<f64>, rng: &mut ChaCha8Rng);
}

pub struct Identity;

impl FeatureTransform for Identity {
    fn apply(&self, _sample: &mut Vec<f64>, _rng: &mut ChaCha8Rng) {}
}

/// Additive Gaussian jitter in feature space.
pub struct GaussianJitter {
    pub sigma: f64,
}

impl FeatureTransform for GaussianJitter {
    fn apply(&self, sample: &mut Vec<f64>, rng: &mut ChaCha8Rng) {
        for v in sample.iter_mut() {
            *v += self.sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Apply `support_aug` to every support sample and `query_aug` to every
/// query sample. Transforms must preserve the per-sample shape.
pub fn apply_transforms(
    episode: &Episode,
    support_aug: &dyn FeatureTransform,
    query_aug: &dyn FeatureTransform,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let mut out = episode.clone();
    let flen = episode.feature_len();
    transform_block(&mut out.support_features, flen, support_aug, rng)?;
    transform_block(&mut out.query_features, flen, query_aug, rng)?;
    Ok(out)
}

fn transform_block(
    block: &mut Vec<f64>,
    flen: usize,
    t: &dyn FeatureTransform,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = block.len() / flen;
    let mut transformed = Vec::with_capacity(block.len());
    for i in 0..n {
        let mut sample = block[i * flen..(i + 1) * flen].to_vec();
        t.apply(&mut sample, rng);
        if sample.len() != flen {
            return Err(Error::Transform(format!(
                "transform changed sample length {} -> {}",
                flen,
                sample.len()
            )));
        }
        transformed.extend_from_slice(&sample);
    }
    *block = transformed;
    Ok(())
}

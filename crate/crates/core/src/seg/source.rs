//! Where segmentations come from: a prior-aware degradation oracle, or masks on disk.

use std::path::{Path, PathBuf};

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};

use super::degrade::{degrade_mask, DegradeParams};
use crate::camera::View;
use crate::error::{Error, Result};
use crate::mask::{iou, MaskImage};
use crate::objective::StereoMasks;

/// How the quality of the prior channel feeds back into segmentation quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorResponse {
    /// Prior IoU (against the truth) above which the segmentation improves.
    pub threshold: f64,
    /// IoU added to the calibration target when the prior is good.
    pub gain: f64,
}

impl Default for PriorResponse {
    fn default() -> Self {
        PriorResponse { threshold: 0.8, gain: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub enum SegmentationSource {
    /// Degraded ground truth, with quality modulated by the prior channel.
    Oracle {
        truth: Vec<StereoMasks>,
        params: DegradeParams,
        response: PriorResponse,
    },
    /// `{config_index}_{left|right}.png` in a directory; the prior is ignored.
    ExternalMasks { dir: PathBuf },
    /// Re-indexed view of another source: item `i` is `indices[i]` of `inner`.
    Subset { inner: Box<SegmentationSource>, indices: Vec<usize> },
}

/// Distinct, reproducible seed per (configuration, view).
fn item_seed(seed: u64, index: usize, view: View) -> u64 {
    let mut z = seed ^ ((index as u64) << 1 | (view == View::Right) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SegmentationSource {
    pub fn oracle(truth: Vec<StereoMasks>, params: DegradeParams) -> Self {
        SegmentationSource::Oracle {
            truth,
            params,
            response: PriorResponse::default(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        SegmentationSource::Subset {
            inner: Box::new(self.clone()),
            indices: indices.to_vec(),
        }
    }

    /// Segment one view of one configuration, optionally conditioned on a prior render.
    pub fn segment(&self, index: usize, view: View, prior: Option<&MaskImage>) -> Result<MaskImage> {
        match self {
            SegmentationSource::Oracle { truth, params, response } => {
                let gt = truth
                    .get(index)
                    .ok_or_else(|| Error::Precondition(format!("no ground truth for configuration {index}")))?
                    .view(view);
                let mut p = params.reseeded(item_seed(params.seed, index, view));
                let good_prior = match prior {
                    Some(pr) if pr.count_on() > 0 => iou(pr, gt)? > response.threshold,
                    _ => false,
                };
                if good_prior {
                    let base = match p.target_iou {
                        Some(t) => t,
                        None => degrade_mask(gt, &p)?.iou,
                    };
                    p.target_iou = Some((base + response.gain).min(1.0));
                }
                Ok(degrade_mask(gt, &p)?.mask)
            }
            SegmentationSource::ExternalMasks { dir } => {
                let path = external_path(dir, index, view);
                let m = MaskImage::read_png(&path)?;
                Ok(m.binarized(0.5))
            }
            SegmentationSource::Subset { inner, indices } => {
                let i = *indices
                    .get(index)
                    .ok_or_else(|| Error::Precondition(format!("subset has no item {index}")))?;
                inner.segment(i, view, prior)
            }
        }
    }

    /// Segment every configuration in both views.
    pub fn segment_all(&self, n: usize, priors: Option<&[StereoMasks]>) -> Result<Vec<StereoMasks>> {
        (0..n)
            .map(|i| {
                let prior = |v: View| priors.map(|p| p[i].view(v));
                Ok(StereoMasks {
                    left: self.segment(i, View::Left, prior(View::Left))?,
                    right: self.segment(i, View::Right, prior(View::Right))?,
                })
            })
            .collect()
    }
}

pub fn external_path(dir: &Path, index: usize, view: View) -> PathBuf {
    dir.join(format!("{index}_{}.png", view.name()))
}

/// Pose deviations used to synthesise imperfect priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSampler {
    /// Per-axis translation range, metres.
    pub translation_range: (f64, f64),
    /// Exact axis-angle magnitude, degrees.
    pub rotation_magnitude_deg: f64,
}

impl Default for PerturbSampler {
    fn default() -> Self {
        PerturbSampler {
            translation_range: (0.0, 0.05),
            rotation_magnitude_deg: 5.0,
        }
    }
}

impl PerturbSampler {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.translation_range;
        if !(a >= 0.0 && b >= a && b.is_finite()) || !(self.rotation_magnitude_deg >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid perturbation sampler {self:?}")));
        }
        Ok(())
    }

    /// Translation with each component uniform in the range; rotation about a uniform axis by exactly the magnitude.
    pub fn sample(&self, rng: &mut impl Rng) -> Isometry3<f64> {
        let (a, b) = self.translation_range;
        let mut t = [0.0; 3];
        for c in &mut t {
            *c = if b > a { rng.random_range(a..=b) } else { a };
        }
        let axis: [f64; 3] = UnitSphere.sample(rng);
        let omega = Vector3::from(axis) * self.rotation_magnitude_deg.to_radians();
        Isometry3::from_parts(Translation3::from(Vector3::from(t)), UnitQuaternion::from_scaled_axis(omega))
    }
}

pub fn sample_prior_perturbation(s: &PerturbSampler, seed: u64, n: usize) -> Result<Vec<Isometry3<f64>>> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| s.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perturbations_respect_ranges() {
        let s = PerturbSampler::default();
        let draws = sample_prior_perturbation(&s, 9, 10_000).unwrap();
        let mut max_t: f64 = 0.0;
        for d in &draws {
            let t = d.translation.vector;
            assert!(t.iter().all(|&c| (0.0..=0.05).contains(&c)));
            max_t = max_t.max(t.max());
            assert!((d.rotation.angle() - 5f64.to_radians()).abs() < 1e-12);
        }
        assert!(max_t > 0.049);
        assert_eq!(draws, sample_prior_perturbation(&s, 9, 10_000).unwrap());
    }

    #[test]
    fn item_seeds_differ() {
        let a = item_seed(1, 0, View::Left);
        assert_ne!(a, item_seed(1, 0, View::Right));
        assert_ne!(a, item_seed(1, 1, View::Left));
        assert_ne!(a, item_seed(2, 0, View::Left));
    }
}

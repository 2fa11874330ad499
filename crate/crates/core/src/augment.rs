//! Input-dropout occlusion masks and ratio-controlled mini-batch sampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Patch;

/// Number of masks, including the no-occlusion mask `1`.
pub const MASK_COUNT: u8 = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("no positive samples to draw from")]
    InsufficientPositives,
    #[error("no negative samples to draw from")]
    InsufficientNegatives,
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid mask table: {0}")]
    InvalidMaskTable(String),
}

/// Occluding rectangle in normalized patch coordinates (`x` right, `y` down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionMask {
    pub mask_id: u8,
    pub rect: [f64; 4],
    /// Each edge moves by up to this much (normalized) when applied.
    pub jitter: f64,
}

impl OcclusionMask {
    pub fn is_empty(&self) -> bool {
        self.rect[2] <= self.rect[0] || self.rect[3] <= self.rect[1]
    }

    /// Edge-jittered rectangle, clamped to the unit square.
    pub fn jittered<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        if self.is_empty() {
            return self.rect;
        }
        let mut r = self.rect;
        if self.jitter > 0.0 {
            for v in r.iter_mut() {
                *v += rng.gen_range(-self.jitter..=self.jitter);
            }
        }
        for v in r.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        r
    }
}

/// The seven masks: none, left half, right half, bottom half, top third,
/// bottom-left quadrant, bottom-right quadrant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskTable(Vec<OcclusionMask>);

impl Default for MaskTable {
    fn default() -> Self {
        let j = 0.1;
        let m = |mask_id, rect, jitter| OcclusionMask {
            mask_id,
            rect,
            jitter,
        };
        MaskTable(vec![
            m(1, [0.0, 0.0, 0.0, 0.0], 0.0),
            m(2, [0.0, 0.0, 0.5, 1.0], j),
            m(3, [0.5, 0.0, 1.0, 1.0], j),
            m(4, [0.0, 0.5, 1.0, 1.0], j),
            m(5, [0.0, 0.0, 1.0, 1.0 / 3.0], j),
            m(6, [0.0, 0.5, 0.5, 1.0], j),
            m(7, [0.5, 0.5, 1.0, 1.0], j),
        ])
    }
}

impl MaskTable {
    pub fn new(masks: Vec<OcclusionMask>) -> Result<Self, SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidMaskTable(m));
        if masks.len() != MASK_COUNT as usize {
            return bad(format!("expected {MASK_COUNT} masks, got {}", masks.len()));
        }
        for (i, m) in masks.iter().enumerate() {
            if m.mask_id as usize != i + 1 {
                return bad(format!("mask ids must be 1..=7 in order, found {}", m.mask_id));
            }
            if m.rect.iter().any(|v| !(0.0..=1.0).contains(v)) || !(0.0..=0.5).contains(&m.jitter) {
                return bad(format!("mask {} leaves the unit square", m.mask_id));
            }
        }
        if !masks[0].is_empty() {
            return bad("mask 1 must be the empty (no occlusion) mask".into());
        }
        Ok(MaskTable(masks))
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let masks: Vec<OcclusionMask> = serde_json::from_str(&fs::read_to_string(path)?)?;
        Ok(Self::new(masks)?)
    }

    pub fn get(&self, mask_id: u8) -> Option<&OcclusionMask> {
        self.0.get(usize::from(mask_id).checked_sub(1)?)
    }

    pub fn masks(&self) -> &[OcclusionMask] {
        &self.0
    }
}

/// Uniform draw over mask ids `1..=7`.
pub fn choose_mask<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    rng.gen_range(1..=MASK_COUNT)
}

/// Replaces the pixels under a jittered mask with uniform noise on `[0, 1)`.
///
/// A pixel is covered when its center lies inside the rectangle. Pixels
/// outside are left bit-identical; mask `1` returns the input unchanged.
pub fn apply_input_dropout<R: Rng + ?Sized>(
    patch: &Patch,
    mask_id: u8,
    table: &MaskTable,
    rng: &mut R,
) -> Patch {
    let mut out = patch.clone();
    let Some(mask) = table.get(mask_id) else {
        return out;
    };
    if mask.is_empty() {
        return out;
    }
    let [x0, y0, x1, y1] = mask.jittered(rng);
    let (w, h) = (patch.width as f64, patch.height as f64);
    for y in 0..patch.height {
        let cy = (y as f64 + 0.5) / h;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for x in 0..patch.width {
            let cx = (x as f64 + 0.5) / w;
            if cx < x0 || cx >= x1 {
                continue;
            }
            for c in 0..3 {
                out.set(y, x, c, rng.gen::<f32>());
            }
        }
    }
    out
}

/// Mini-batch composition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    /// Fraction of positives per batch.
    pub r: f64,
    pub seed: u64,
}

impl SamplerConfig {
    /// Positives per batch: `round(r·batch_size)`, at least 1.
    pub fn positives_per_batch(&self) -> usize {
        ((self.r * self.batch_size as f64).round() as usize)
            .max(1)
            .min(self.batch_size)
    }

    pub fn negatives_per_batch(&self) -> usize {
        self.batch_size - self.positives_per_batch()
    }

    fn validate(&self) -> Result<(), SamplerError> {
        if self.batch_size == 0 {
            return Err(SamplerError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(SamplerError::InvalidConfig(format!(
                "positive fraction r must lie in (0, 1], got {}",
                self.r
            )));
        }
        Ok(())
    }
}

/// Indices into a dataset for one mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.positives.iter().chain(&self.negatives).copied()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws batches with an exact positive count. Negatives are drawn without
/// replacement within an epoch; positives cycle through reshuffled passes.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    cfg: SamplerConfig,
    positives: Vec<usize>,
    negatives: Vec<usize>,
    pos_pool: Vec<usize>,
}

impl MinibatchSampler {
    /// `labels[i]` is 1 for positives, 0 for negatives.
    pub fn new(labels: &[u8], cfg: SamplerConfig) -> Result<Self, SamplerError> {
        cfg.validate()?;
        let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
        if positives.is_empty() {
            return Err(SamplerError::InsufficientPositives);
        }
        if negatives.is_empty() && cfg.negatives_per_batch() > 0 {
            return Err(SamplerError::InsufficientNegatives);
        }
        Ok(Self {
            cfg,
            positives,
            negatives,
            pos_pool: Vec::new(),
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn next_positive<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos_pool.is_empty() {
            self.pos_pool = self.positives.clone();
            self.pos_pool.shuffle(rng);
        }
        self.pos_pool.pop().expect("refilled above")
    }

    /// All batches of one epoch: one pass over the shuffled negatives.
    pub fn epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Batch> {
        let n_pos = self.cfg.positives_per_batch();
        let n_neg = self.cfg.negatives_per_batch();
        let mut negs = self.negatives.clone();
        negs.shuffle(rng);
        let n_batches = if n_neg == 0 {
            self.positives.len().div_ceil(n_pos)
        } else {
            negs.len().div_ceil(n_neg)
        };
        let mut batches = Vec::with_capacity(n_batches);
        for b in 0..n_batches {
            let negatives = if n_neg == 0 {
                Vec::new()
            } else {
                negs[b * n_neg..((b + 1) * n_neg).min(negs.len())].to_vec()
            };
            let positives = (0..n_pos).map(|_| self.next_positive(rng)).collect();
            batches.push(Batch {
                positives,
                negatives,
            });
        }
        batches
    }
}

/// Convenience wrapper drawing the first batch of a fresh epoch.
pub fn sample_minibatch<R: Rng + ?Sized>(
    labels: &[u8],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Batch, SamplerError> {
    let mut s = MinibatchSampler::new(labels, *cfg)?;
    Ok(s.epoch(rng).swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn ramp_patch(h: usize, w: usize) -> Patch {
        let mut p = Patch::zeros(h, w);
        for (i, v) in p.data.iter_mut().enumerate() {
            *v = (i % 17) as f32 / 17.0;
        }
        p
    }

    #[test]
    fn mask_one_is_identity() {
        let table = MaskTable::default();
        let p = ramp_patch(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(apply_input_dropout(&p, 1, &table, &mut rng), p);
    }

    #[test]
    fn left_half_mask_is_local() {
        let masks: Vec<OcclusionMask> = MaskTable::default()
            .masks()
            .iter()
            .map(|m| OcclusionMask { jitter: 0.0, ..*m })
            .collect();
        let table = MaskTable::new(masks).unwrap();
        let mut p = Patch::zeros(10, 10);
        p.data.fill(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = apply_input_dropout(&p, 2, &table, &mut rng);
        let mut left = Vec::new();
        for y in 0..10 {
            for x in 0..10 {
                for c in 0..3 {
                    if x >= 5 {
                        assert_eq!(out.get(y, x, c), 0.3);
                    } else {
                        left.push(out.get(y, x, c));
                    }
                }
            }
        }
        assert!(left.iter().any(|&v| v != left[0]));
    }

    #[test]
    fn jitter_stays_in_unit_square() {
        let table = MaskTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in table.masks() {
            for _ in 0..200 {
                let r = m.jittered(&mut rng);
                assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn mask_choice_is_reproducible_and_in_range() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| choose_mask(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert!(draw(6).iter().all(|m| (1..=7).contains(m)));
    }

    #[test]
    fn mask_table_validation() {
        let mut masks = MaskTable::default().masks().to_vec();
        masks[0].rect = [0.0, 0.0, 0.5, 0.5];
        assert!(MaskTable::new(masks).is_err());
        assert!(MaskTable::new(Vec::new()).is_err());
        let text = serde_json::to_string(&MaskTable::default()).unwrap();
        assert!(text.starts_with("[{\"mask_id\":1,\"rect\":"));
    }

    #[test]
    fn batch_ratio_counts() {
        let cfg = SamplerConfig {
            batch_size: 64,
            r: 0.33,
            seed: 0,
        };
        assert_eq!((cfg.positives_per_batch(), cfg.negatives_per_batch()), (21, 43));
        let cfg = SamplerConfig {
            batch_size: 4,
            r: 0.5,
            seed: 0,
        };
        assert_eq!((cfg.positives_per_batch(), cfg.negatives_per_batch()), (2, 2));
        let tiny = SamplerConfig {
            batch_size: 10,
            r: 0.01,
            seed: 0,
        };
        assert_eq!(tiny.positives_per_batch(), 1);
    }

    #[test]
    fn negatives_are_used_once_per_epoch() {
        let mut labels = vec![0u8; 100];
        labels.extend(std::iter::repeat_n(1u8, 7));
        let cfg = SamplerConfig {
            batch_size: 12,
            r: 2.0 / 12.0,
            seed: 0,
        };
        let mut s = MinibatchSampler::new(&labels, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let batches = s.epoch(&mut rng);
            assert_eq!(batches.len(), 10);
            let mut seen: HashMap<usize, usize> = HashMap::new();
            for b in &batches {
                assert_eq!(b.positives.len(), 2);
                assert_eq!(b.negatives.len(), 10);
                assert!(b.positives.iter().all(|&i| labels[i] == 1));
                for &n in &b.negatives {
                    *seen.entry(n).or_default() += 1;
                }
            }
            assert_eq!(seen.len(), 100);
            assert!(seen.values().all(|&c| c == 1));
        }
    }

    #[test]
    fn missing_classes_are_errors() {
        let cfg = SamplerConfig {
            batch_size: 4,
            r: 0.5,
            seed: 0,
        };
        assert_eq!(
            MinibatchSampler::new(&[0, 0, 0], cfg).unwrap_err(),
            SamplerError::InsufficientPositives
        );
        assert_eq!(
            MinibatchSampler::new(&[1, 1], cfg).unwrap_err(),
            SamplerError::InsufficientNegatives
        );
    }
}

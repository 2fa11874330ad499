//! Synthetic hard negatives: shifted rectangles and mixed persons.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MultiViewError, MultiViewSample, Provenance};
use crate::geometry::{crop_region, CropSpec};
use crate::synthscene::FrameStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardNegativeMode {
    Shift,
    Mix,
}

/// A view-source pattern is valid when it uses both sources.
pub fn mix_pattern_is_valid(pattern: &[bool]) -> bool {
    pattern.iter().any(|&b| b) && pattern.iter().any(|&b| !b)
}

/// One negative per source positive.
///
/// Shift moves the rectangles of one or two visible views sideways by
/// `±U[0.5, 1.5]` crop widths and re-crops them from the frame. Mix takes
/// each view from one of two different persons of the same frame, never all
/// views from the same one.
pub fn generate_hard_negatives<R: Rng + ?Sized>(
    positives: &[MultiViewSample],
    mode: HardNegativeMode,
    store: &FrameStore,
    crop: &CropSpec,
    rng: &mut R,
) -> crate::Result<Vec<MultiViewSample>> {
    match mode {
        HardNegativeMode::Shift => shift(positives, store, crop, rng),
        HardNegativeMode::Mix => mix(positives, rng),
    }
}

fn shift<R: Rng + ?Sized>(
    positives: &[MultiViewSample],
    store: &FrameStore,
    crop: &CropSpec,
    rng: &mut R,
) -> crate::Result<Vec<MultiViewSample>> {
    let mut out = Vec::with_capacity(positives.len());
    for p in positives {
        let visible: Vec<usize> = (0..p.views()).filter(|&v| p.rects[v].visible).collect();
        if visible.is_empty() {
            continue;
        }
        let frame = store.frames.get(p.frame_id as usize).ok_or_else(|| {
            MultiViewError::InvalidConfig(format!("frame {} is not in the image store", p.frame_id))
        })?;
        let k = rng.gen_range(1..=2).min(visible.len());
        let chosen: Vec<usize> = visible.choose_multiple(rng, k).copied().collect();
        let mut s = p.clone();
        for v in chosen {
            let r = p.rects[v];
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let dx = sign * rng.gen_range(0.5..=1.5) * r.width();
            let moved = r.translated(dx, 0.0);
            s.rects[v] = moved;
            s.patches[v] = crop_region(&frame[v], &moved, crop)?;
        }
        s.label = 0;
        s.provenance = Provenance::HardShift;
        s.person = None;
        out.push(s);
    }
    Ok(out)
}

fn mix<R: Rng + ?Sized>(positives: &[MultiViewSample], rng: &mut R) -> crate::Result<Vec<MultiViewSample>> {
    let mut by_frame: BTreeMap<u64, Vec<&MultiViewSample>> = BTreeMap::new();
    for p in positives {
        by_frame.entry(p.frame_id).or_default().push(p);
    }
    let mut out = Vec::new();
    for group in by_frame.values() {
        for a in group {
            let partners: Vec<&&MultiViewSample> = group
                .iter()
                .filter(|b| b.person != a.person || b.cell != a.cell)
                .collect();
            let Some(b) = partners.choose(rng) else {
                continue;
            };
            let c = a.views();
            if c < 2 || b.views() != c {
                continue;
            }
            let pattern = loop {
                let p: Vec<bool> = (0..c).map(|_| rng.gen_bool(0.5)).collect();
                if mix_pattern_is_valid(&p) {
                    break p;
                }
            };
            let mut s = (*a).clone();
            for (v, &from_b) in pattern.iter().enumerate() {
                if from_b {
                    s.patches[v] = b.patches[v].clone();
                    s.rects[v] = b.rects[v];
                }
            }
            s.label = 0;
            s.provenance = Provenance::HardMix;
            s.person = None;
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(MultiViewError::NotEnoughPersons.into());
    }
    Ok(out)
}

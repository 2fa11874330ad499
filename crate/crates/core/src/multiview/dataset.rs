//! Labelled training samples from annotations and frames.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Annotation, MonoSample, MultiViewError, MultiViewSample, Provenance};
use crate::geometry::{crop_region, project_cylinder, CameraCalibration, CropRect, CropSpec, Cylinder, GroundGrid};
use crate::nms::iou;
use crate::synthscene::FrameStore;
use crate::Result;

/// How negative cells are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub negatives_per_frame: usize,
    pub crop: CropSpec,
    /// Share of negatives drawn from empty cells whose crop in some view
    /// still shows a person (IoU ≥ [`MONO_POSITIVE_IOU`]). The others come
    /// from cells farther than Chebyshev distance 2 from every person, then
    /// from whatever is left.
    pub near_negative_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            negatives_per_frame: 6,
            crop: CropSpec::default(),
            near_negative_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub multiview: Vec<MultiViewSample>,
    pub mono: Vec<MonoSample>,
}

impl Dataset {
    pub fn positives(&self) -> usize {
        self.multiview.iter().filter(|s| s.label == 1).count()
    }
}

/// Label of a single view: 1 when some present person's rectangle overlaps
/// the crop with IoU at least 0.5.
pub const MONO_POSITIVE_IOU: f64 = 0.5;

/// Positives at every annotated cell, `negatives_per_frame` empty cells per
/// frame, plus one monocular sample per visible view of each of them.
pub fn build_dataset(
    grid: &GroundGrid,
    calibs: &[CameraCalibration],
    annotations: &[Annotation],
    store: &FrameStore,
    opts: &DatasetOptions,
) -> Result<Dataset> {
    let template = Cylinder::person_at(Point3::origin());
    let mut by_frame: BTreeMap<u64, Vec<(u32, usize)>> = BTreeMap::new();
    for a in annotations {
        if a.frame as usize >= store.len() {
            return Err(MultiViewError::InvalidConfig(format!(
                "annotation for frame {} but only {} frames are loaded",
                a.frame,
                store.len()
            ))
            .into());
        }
        grid.row_col(a.cell)?;
        by_frame.entry(a.frame).or_default().push((a.person, a.cell));
    }
    for frame in &store.frames {
        if frame.len() != calibs.len() {
            return Err(MultiViewError::CalibrationMismatch(format!(
                "{} images per frame for {} calibrations",
                frame.len(),
                calibs.len()
            ))
            .into());
        }
    }
    let per_frame: Vec<Result<(Vec<MultiViewSample>, Vec<MonoSample>)>> = (0..store.len())
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(opts.seed, t));
            let occupants = by_frame.get(&(t as u64)).cloned().unwrap_or_default();
            let occupied: BTreeSet<usize> = occupants.iter().map(|o| o.1).collect();
            let mut picks: Vec<(usize, Option<u32>, u8)> =
                occupants.iter().map(|&(pid, c)| (c, Some(pid), 1)).collect();
            let free: Vec<usize> = (0..grid.len()).filter(|c| !occupied.contains(c)).collect();
            let cell_rects = |cell: usize| -> Result<Vec<CropRect>> {
                let cyl = template.moved_to(grid.cell_center(cell)?);
                Ok(calibs.iter().map(|c| project_cylinder(c, &cyl)).collect())
            };
            let occupied_rects: Vec<Vec<CropRect>> =
                occupied.iter().map(|&c| cell_rects(c)).collect::<Result<_>>()?;
            let person_rects: Vec<Vec<CropRect>> = (0..calibs.len())
                .map(|v| occupied_rects.iter().map(|r| r[v]).collect())
                .collect();
            let shows_person = |v: usize, r: &CropRect| {
                r.visible
                    && person_rects[v]
                        .iter()
                        .any(|pr| pr.visible && iou(pr, r) >= MONO_POSITIVE_IOU)
            };
            let mut near = Vec::new();
            let mut far = Vec::new();
            let mut rest = Vec::new();
            for &c in &free {
                let rects = cell_rects(c)?;
                if rects.iter().enumerate().any(|(v, r)| shows_person(v, r)) {
                    near.push(c);
                } else if occupied
                    .iter()
                    .all(|&o| grid.chebyshev(c, o).map_or(true, |d| d > 2))
                {
                    far.push(c);
                } else {
                    rest.push(c);
                }
            }
            let n_near = ((opts.negatives_per_frame as f64 * opts.near_negative_fraction).round() as usize)
                .min(near.len());
            let mut chosen: BTreeSet<usize> = near.choose_multiple(&mut rng, n_near).copied().collect();
            for pool in [&far, &rest, &near] {
                let left: Vec<usize> = pool.iter().copied().filter(|c| !chosen.contains(c)).collect();
                let n = opts.negatives_per_frame.saturating_sub(chosen.len()).min(left.len());
                chosen.extend(left.choose_multiple(&mut rng, n).copied());
            }
            picks.extend(chosen.into_iter().map(|c| (c, None, 0)));

            let mut mv = Vec::with_capacity(picks.len());
            let mut mono = Vec::new();
            for (cell, person, label) in picks {
                let rects = cell_rects(cell)?;
                let patches = rects
                    .iter()
                    .zip(&store.frames[t])
                    .map(|(r, img)| crop_region(img, r, &opts.crop))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                for (v, r) in rects.iter().enumerate() {
                    if !r.visible {
                        continue;
                    }
                    let hit = shows_person(v, r);
                    mono.push(MonoSample {
                        patch: patches[v].clone(),
                        label: u8::from(hit),
                        frame_id: t as u64,
                        cell,
                        view: v,
                    });
                }
                mv.push(MultiViewSample {
                    patches,
                    rects,
                    label,
                    cell,
                    frame_id: t as u64,
                    provenance: if label == 1 {
                        Provenance::Annotated
                    } else {
                        Provenance::EasyNegative
                    },
                    person,
                });
            }
            Ok((mv, mono))
        })
        .collect();
    let mut out = Dataset::default();
    for r in per_frame {
        let (mv, mono) = r?;
        out.multiview.extend(mv);
        out.mono.extend(mono);
    }
    Ok(out)
}


fn frame_seed(seed: u64, t: usize) -> u64 {
    (seed ^ 0xD6E8_FEB8_6659_FD93).wrapping_add(t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

//! Frame-level detection: score every grid cell, keep candidates above
//! the score threshold.

use serde::{Deserialize, Serialize};

use super::{MultiViewError, MultiViewModel};
use crate::geometry::{crop_region, project_grid, CameraCalibration, CropRect, Cylinder, GroundGrid};
use crate::image::{Patch, RgbImage};
use crate::nms::DetectionCandidate;
use crate::nnet::Tensor;

/// Per-cell occupancy probabilities of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMap {
    pub frame_id: u64,
    pub q: Vec<f64>,
}

impl OccupancyMap {
    pub fn argmax(&self) -> Option<usize> {
        (0..self.q.len()).max_by(|&a, &b| self.q[a].total_cmp(&self.q[b]).then(b.cmp(&a)))
    }
}

/// Cameras, grid and the per-view crop rectangle of every cell.
#[derive(Debug, Clone)]
pub struct DetectionRig {
    pub grid: GroundGrid,
    pub calibs: Vec<CameraCalibration>,
    pub template: Cylinder,
    /// `rects[view][cell]`.
    pub rects: Vec<Vec<CropRect>>,
}

impl DetectionRig {
    pub fn new(grid: GroundGrid, calibs: Vec<CameraCalibration>, template: Cylinder) -> Self {
        let rects = calibs.iter().map(|c| project_grid(c, &grid, &template)).collect();
        Self {
            grid,
            calibs,
            template,
            rects,
        }
    }

    /// Scores all cells; cells whose `q ≥ tau_s` become candidates.
    pub fn detect(
        &self,
        model: &MultiViewModel,
        frame_id: u64,
        images: &[RgbImage],
        tau_s: f64,
    ) -> crate::Result<(Vec<DetectionCandidate>, OccupancyMap)> {
        if images.len() != self.calibs.len() || model.views() != self.calibs.len() {
            return Err(MultiViewError::CalibrationMismatch(format!(
                "{} images, {} calibrations, model with {} views",
                images.len(),
                self.calibs.len(),
                model.views()
            ))
            .into());
        }
        for (img, cal) in images.iter().zip(&self.calibs) {
            if img.width != cal.width() || img.height != cal.height() {
                return Err(MultiViewError::CalibrationMismatch(format!(
                    "camera {} expects {}x{} images, got {}x{}",
                    cal.camera_id(),
                    cal.width(),
                    cal.height(),
                    img.width,
                    img.height
                ))
                .into());
            }
        }
        let g = self.grid.len();
        let mut per_view = Vec::with_capacity(images.len());
        for (v, img) in images.iter().enumerate() {
            let mut feats = Vec::with_capacity(g * model.q);
            let cells: Vec<usize> = (0..g).collect();
            for chunk in cells.chunks(256) {
                let patches = chunk
                    .iter()
                    .map(|&c| crop_region(img, &self.rects[v][c], &model.crop))
                    .collect::<Result<Vec<Patch>, _>>()?;
                let refs: Vec<&Patch> = patches.iter().collect();
                feats.extend(model.embed(v, &refs)?.into_data());
            }
            per_view.push(Tensor::new(vec![g, model.q], feats)?);
        }
        let feats = Tensor::concat_features(&per_view)?;
        let q = model.score_features(&feats)?;
        let candidates = (0..g)
            .filter(|&c| q[c] >= tau_s)
            .map(|c| DetectionCandidate::new(c, q[c], self.rects.iter().map(|r| r[c]).collect()))
            .filter(|d| d.rects.iter().any(Option::is_some))
            .collect();
        Ok((candidates, OccupancyMap { frame_id, q }))
    }
}

//! Multi-view occupancy classifier: per-view embeddings ψ copied from a
//! monocular network, concatenated into Ψ and scored by a head Φ.

mod dataset;
mod detect;
mod hardneg;
mod io;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::Forest;
use crate::geometry::{CropRect, CropSpec};
use crate::image::Patch;
use crate::nnet::checkpoint::{decode, encode, network_blocks, network_from_blocks, write_file};
use crate::nnet::{LayerSpec, Network, NnetError, Tensor};

pub use dataset::{build_dataset, Dataset, DatasetOptions, MONO_POSITIVE_IOU};
pub use detect::{DetectionRig, OccupancyMap};
pub use hardneg::{generate_hard_negatives, mix_pattern_is_valid, HardNegativeMode};
pub use io::{
    read_annotations, read_detections, read_json_lines, read_occupancy_csv, write_annotations, write_detections,
    write_occupancy_csv, Annotation, DetectionRecord,
};
pub use train::{
    accuracy_at, features_in_chunks, patches_tensor, train_head, train_monocular, EpochLog, TrainOptions, TrainReport,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MultiViewError {
    #[error("expected {expected} views, got {got}")]
    ViewCountMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient training data: {0}")]
    InsufficientData(String),
    #[error("no frame has positives of two different persons")]
    NotEnoughPersons,
    #[error("calibration mismatch: {0}")]
    CalibrationMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Annotated,
    EasyNegative,
    HardShift,
    HardMix,
}

/// One grid cell seen from every camera.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewSample {
    /// One patch per view, all-zero where the cell is out of view.
    pub patches: Vec<Patch>,
    pub rects: Vec<CropRect>,
    pub label: u8,
    pub cell: usize,
    pub frame_id: u64,
    pub provenance: Provenance,
    /// Person standing at the cell, for positives.
    pub person: Option<u32>,
}

impl MultiViewSample {
    /// Keeps only the listed views, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Self {
        Self {
            patches: views.iter().map(|&v| self.patches[v].clone()).collect(),
            rects: views.iter().map(|&v| self.rects[v]).collect(),
            ..self.clone()
        }
    }

    pub fn views(&self) -> usize {
        self.patches.len()
    }
}

/// A single-view training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MonoSample {
    pub patch: Patch,
    pub label: u8,
    pub frame_id: u64,
    pub cell: usize,
    pub view: usize,
}

/// Hidden widths of the head Φ; the output layer (2 units) is implied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
}

impl HeadSpec {
    /// Linear(C·Q→128)-ReLU-Linear(128→64)-ReLU-Linear(64→2).
    pub fn desk() -> Self {
        Self { hidden: vec![128, 64] }
    }

    /// The 1024/512/2 head.
    pub fn full_scale() -> Self {
        Self {
            hidden: vec![1024, 512],
        }
    }

    pub fn layers(&self, inputs: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut width = inputs;
        for &h in &self.hidden {
            specs.push(LayerSpec::Linear {
                inputs: width,
                outputs: h,
            });
            specs.push(LayerSpec::Relu);
            width = h;
        }
        specs.push(LayerSpec::Linear {
            inputs: width,
            outputs: 2,
        });
        specs.push(LayerSpec::LogSoftmax);
        specs
    }
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self::desk()
    }
}

/// C embedding networks plus the joint head (or a forest in its place).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewModel {
    pub embeddings: Vec<Network>,
    pub head: Network,
    pub head_spec: HeadSpec,
    pub depth: usize,
    pub freeze_embeddings: bool,
    /// Camera id per view; features are concatenated in this order.
    pub camera_ids: Vec<u32>,
    /// Features per view.
    pub q: usize,
    pub crop: CropSpec,
    /// When set, scores come from the forest instead of the head.
    pub forest: Option<Forest>,
}

fn patch_shape(crop: &CropSpec) -> [usize; 3] {
    [3, crop.out_h, crop.out_w]
}

/// Copies the first `depth` layers of `mono` into each of `camera_ids.len()`
/// views and puts a freshly initialized head on top.
pub fn build_multiview(
    mono: &Network,
    depth: usize,
    camera_ids: &[u32],
    head: &HeadSpec,
    crop: CropSpec,
    seed: u64,
) -> crate::Result<MultiViewModel> {
    if camera_ids.is_empty() {
        return Err(MultiViewError::InvalidConfig("at least one view is required".into()).into());
    }
    let embed = mono.truncated(depth)?;
    let [c, h, w] = patch_shape(&crop);
    let out = embed.output_shape(&[1, c, h, w])?;
    let q: usize = out[1..].iter().product();
    let head_net = Network::new(&head.layers(camera_ids.len() * q), seed)?;
    Ok(MultiViewModel {
        embeddings: vec![embed; camera_ids.len()],
        head: head_net,
        head_spec: head.clone(),
        depth,
        freeze_embeddings: true,
        camera_ids: camera_ids.to_vec(),
        q,
        crop,
        forest: None,
    })
}

impl MultiViewModel {
    pub fn views(&self) -> usize {
        self.embeddings.len()
    }

    /// Flattened ψ features of a batch of patches in view `v`: `[n, q]`.
    pub fn embed(&self, v: usize, patches: &[&Patch]) -> crate::Result<Tensor> {
        let x = patches_tensor(patches, &self.crop)?;
        let n = patches.len();
        Ok(self.embeddings[v].forward(&x)?.reshaped(vec![n, self.q])?)
    }

    /// Ψ for a batch of samples: `[n, C·q]`, views in model order.
    pub fn features(&self, samples: &[&MultiViewSample]) -> crate::Result<Tensor> {
        for s in samples {
            if s.views() != self.views() {
                return Err(MultiViewError::ViewCountMismatch {
                    expected: self.views(),
                    got: s.views(),
                }
                .into());
            }
        }
        let mut parts = Vec::with_capacity(self.views());
        for v in 0..self.views() {
            let ps: Vec<&Patch> = samples.iter().map(|s| &s.patches[v]).collect();
            parts.push(self.embed(v, &ps)?);
        }
        Ok(Tensor::concat_features(&parts)?)
    }

    /// Positive-class probability for each row of a Ψ batch.
    pub fn score_features(&self, feats: &Tensor) -> crate::Result<Vec<f64>> {
        if let Some(f) = &self.forest {
            let rows: Vec<Vec<f64>> = (0..feats.batch()).map(|i| feats.row(i).to_vec()).collect();
            return Ok(f.predict_batch(&rows)?);
        }
        let out = self.head.forward(feats)?;
        Ok((0..out.batch()).map(|i| out.row(i)[1].exp().clamp(0.0, 1.0)).collect())
    }

    /// Log-probabilities of both classes from the head, `[n, 2]`.
    pub fn head_log_probs(&self, feats: &Tensor) -> crate::Result<Tensor> {
        Ok(self.head.forward(feats)?)
    }

    pub fn predict_cell(&self, sample: &MultiViewSample) -> crate::Result<f64> {
        Ok(self.predict(&[sample])?[0])
    }

    /// Scores in chunks of 256 samples.
    pub fn predict(&self, samples: &[&MultiViewSample]) -> crate::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            out.extend(self.score_features(&self.features(chunk)?)?);
        }
        Ok(out)
    }

    /// Digest of all embedding parameters.
    pub fn embeddings_checksum(&self) -> u64 {
        self.embeddings
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |h, e| (h ^ e.checksum()).wrapping_mul(0x100_0000_01b3))
    }

    pub fn to_checkpoint_bytes(&self, metadata: serde_json::Value) -> crate::Result<Vec<u8>> {
        let body = CheckpointBody {
            camera_ids: self.camera_ids.clone(),
            depth: self.depth,
            q: self.q,
            freeze_embeddings: self.freeze_embeddings,
            crop: self.crop,
            head_spec: self.head_spec.clone(),
            embedding_layers: self.embeddings[0].specs(),
            embedding_seed: self.embeddings[0].seed(),
            head_layers: self.head.specs(),
            head_seed: self.head.seed(),
            forest: self.forest.clone(),
            metadata,
        };
        let mut blocks = Vec::new();
        for (v, e) in self.embeddings.iter().enumerate() {
            blocks.extend(network_blocks(e, &format!("embed{v}.")));
        }
        blocks.extend(network_blocks(&self.head, "head."));
        Ok(encode("multiview", serde_json::to_value(body)?, &blocks)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> crate::Result<(Self, serde_json::Value)> {
        let c = decode(bytes)?;
        if c.kind != "multiview" {
            return Err(NnetError::Checkpoint(format!("expected a multiview checkpoint, found {}", c.kind)).into());
        }
        let body: CheckpointBody = serde_json::from_value(c.body)?;
        let mut blocks = c.blocks.into_iter();
        let embeddings = body
            .camera_ids
            .iter()
            .map(|_| network_from_blocks(&body.embedding_layers, body.embedding_seed, &mut blocks))
            .collect::<Result<Vec<_>, _>>()?;
        let head = network_from_blocks(&body.head_layers, body.head_seed, &mut blocks)?;
        if blocks.next().is_some() {
            return Err(NnetError::Checkpoint("unexpected trailing parameter blocks".into()).into());
        }
        Ok((
            Self {
                embeddings,
                head,
                head_spec: body.head_spec,
                depth: body.depth,
                freeze_embeddings: body.freeze_embeddings,
                camera_ids: body.camera_ids,
                q: body.q,
                crop: body.crop,
                forest: body.forest,
            },
            body.metadata,
        ))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> crate::Result<()> {
        write_file(path, &self.to_checkpoint_bytes(metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<(Self, serde_json::Value)> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    camera_ids: Vec<u32>,
    depth: usize,
    q: usize,
    freeze_embeddings: bool,
    crop: CropSpec,
    head_spec: HeadSpec,
    embedding_layers: Vec<LayerSpec>,
    embedding_seed: u64,
    head_layers: Vec<LayerSpec>,
    head_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forest: Option<Forest>,
    metadata: serde_json::Value,
}

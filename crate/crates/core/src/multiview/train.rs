//! Monocular training and head training with the positive-ratio sampler,
//! input dropout and best-validation-loss checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MonoSample, MultiViewError, MultiViewModel, MultiViewSample};
use crate::augment::{apply_input_dropout, choose_mask, MaskTable, MinibatchSampler, SamplerConfig};
use crate::geometry::CropSpec;
use crate::image::Patch;
use crate::nnet::{
    add_param_grads, nll_loss, pnorm_penalty, Network, Optimizer, OptimizerKind, PNorm, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of positives in every batch.
    pub r: f64,
    pub optimizer: OptimizerKind,
    /// Stop after this many epochs without a better validation loss.
    pub patience: Option<usize>,
    pub input_dropout: bool,
    /// Occlusion masks used by input dropout.
    pub masks: MaskTable,
    pub pnorm: Option<PNorm>,
    pub pnorm_weight: f64,
    /// Share of samples held out for validation.
    pub val_fraction: f64,
    /// Cap on batches per epoch.
    pub max_batches: Option<usize>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            r: 0.33,
            optimizer: OptimizerKind::sgd_momentum(),
            patience: Some(10),
            input_dropout: true,
            masks: MaskTable::default(),
            pnorm: None,
            pnorm_weight: 0.0,
            val_fraction: 0.15,
            max_batches: None,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), MultiViewError> {
        let bad = |m: String| Err(MultiViewError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return bad(format!("r must lie in (0, 1], got {}", self.r));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        if !(self.pnorm_weight >= 0.0) {
            return bad("pnorm_weight must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were returned; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// Stacks patches into a `[n, 3, H, W]` tensor.
pub fn patches_tensor(patches: &[&Patch], crop: &CropSpec) -> crate::Result<Tensor> {
    let mut data = Vec::with_capacity(patches.len() * 3 * crop.out_h * crop.out_w);
    for p in patches {
        if p.height != crop.out_h || p.width != crop.out_w {
            return Err(MultiViewError::ShapeMismatch(format!(
                "patch is {}x{}, model expects {}x{}",
                p.height, p.width, crop.out_h, crop.out_w
            ))
            .into());
        }
        p.extend_chw(&mut data);
    }
    Ok(Tensor::new(vec![patches.len(), 3, crop.out_h, crop.out_w], data)?)
}

/// Fraction of correct hard decisions (`q ≥ threshold`).
pub fn accuracy_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let ok = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    ok as f64 / scores.len() as f64
}

/// Deterministic stratified split into train and validation indices.
fn split(labels: &[u8], val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn check_classes(labels: &[u8], what: &str) -> Result<(), MultiViewError> {
    if !labels.contains(&1) || !labels.contains(&0) {
        return Err(MultiViewError::InsufficientData(format!(
            "{what} needs both positive and negative samples"
        )));
    }
    Ok(())
}

/// Mean NLL and accuracy of a log-probability batch.
fn loss_and_accuracy(out: &Tensor, labels: &[usize]) -> crate::Result<(f64, usize)> {
    let (loss, _) = nll_loss(out, labels)?;
    let correct = (0..out.batch())
        .filter(|&i| (out.row(i)[1] >= out.row(i)[0]) == (labels[i] == 1))
        .count();
    Ok((loss, correct))
}

struct EarlyStop {
    best_loss: f64,
    best_epoch: Option<usize>,
    since: usize,
}

impl EarlyStop {
    fn new() -> Self {
        Self {
            best_loss: f64::INFINITY,
            best_epoch: None,
            since: 0,
        }
    }

    /// Records an epoch; true when it is the best so far.
    fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = Some(epoch);
            self.since = 0;
            true
        } else {
            self.since += 1;
            false
        }
    }

    fn exhausted(&self, patience: Option<usize>) -> bool {
        patience.is_some_and(|p| self.since >= p)
    }
}

fn sampler_cfg(opts: &TrainOptions) -> SamplerConfig {
    SamplerConfig {
        batch_size: opts.batch_size,
        r: opts.r,
        seed: opts.seed,
    }
}

/// Trains a full monocular classifier (embedding plus temporary 2-way
/// head). Every training patch goes through input dropout when enabled.
/// Returns the weights with the best validation loss.
pub fn train_monocular(
    net: &Network,
    samples: &[MonoSample],
    crop: &CropSpec,
    opts: &TrainOptions,
) -> crate::Result<(Network, TrainReport)> {
    opts.validate()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    check_classes(&labels, "monocular training")?;
    if opts.epochs == 0 {
        return Ok((net.clone(), TrainReport::default()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (train_idx, val_idx) = split(&labels, opts.val_fraction, &mut rng);
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut sampler = MinibatchSampler::new(&train_labels, sampler_cfg(opts))?;
    let mut net = net.clone();
    let mut optim = Optimizer::new(opts.optimizer, &net);
    let mut best = net.clone();
    let mut stop = EarlyStop::new();
    let mut report = TrainReport::default();
    let val_x = if val_idx.is_empty() {
        None
    } else {
        let ps: Vec<&Patch> = val_idx.iter().map(|&i| &samples[i].patch).collect();
        Some(patches_tensor(&ps, crop)?)
    };
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i] as usize).collect();
    for epoch in 0..opts.epochs {
        let mut batches = sampler.epoch(&mut rng);
        if let Some(m) = opts.max_batches {
            batches.truncate(m);
        }
        let mut total = 0.0;
        for b in &batches {
            let idx: Vec<usize> = b.indices().map(|k| train_idx[k]).collect();
            let patches: Vec<Patch> = idx
                .iter()
                .map(|&i| {
                    if opts.input_dropout {
                        let m = choose_mask(&mut rng);
                        apply_input_dropout(&samples[i].patch, m, &opts.masks, &mut rng)
                    } else {
                        samples[i].patch.clone()
                    }
                })
                .collect();
            let refs: Vec<&Patch> = patches.iter().collect();
            let x = patches_tensor(&refs, crop)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i] as usize).collect();
            let (out, tape) = net.forward_record(&x, &mut rng)?;
            let (loss, g) = nll_loss(&out, &y)?;
            let mut grads = net.backward_tape(&tape, &g)?.params;
            let mut obj = loss;
            if let Some(p) = opts.pnorm {
                let (pen, pg) = pnorm_penalty(&net, p, opts.pnorm_weight);
                add_param_grads(&mut grads, &pg);
                obj += pen;
            }
            optim.step(&mut net, &grads)?;
            total += obj;
        }
        let train_loss = total / batches.len().max(1) as f64;
        let (val_loss, val_accuracy) = match &val_x {
            Some(x) => {
                let (l, c) = loss_and_accuracy(&net.forward(x)?, &val_y)?;
                (l, c as f64 / val_y.len() as f64)
            }
            None => (train_loss, f64::NAN),
        };
        report.log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if stop.update(epoch, val_loss) {
            best = net.clone();
        }
        if stop.exhausted(opts.patience) {
            break;
        }
    }
    report.best_epoch = stop.best_epoch;
    Ok((best, report))
}

/// Trains Φ (and, unless frozen, every ψ) on multi-view samples.
///
/// With frozen embeddings Ψ is computed once and only the head is updated,
/// so the embedding parameters stay bit-identical.
pub fn train_head(
    model: &MultiViewModel,
    samples: &[MultiViewSample],
    opts: &TrainOptions,
) -> crate::Result<(MultiViewModel, TrainReport)> {
    opts.validate()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    check_classes(&labels, "head training")?;
    if opts.epochs == 0 {
        return Ok((model.clone(), TrainReport::default()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (train_idx, val_idx) = split(&labels, opts.val_fraction, &mut rng);
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
    let mut sampler = MinibatchSampler::new(&train_labels, sampler_cfg(opts))?;
    let mut model = model.clone();
    model.forest = None;
    let frozen = model.freeze_embeddings;

    let refs: Vec<&MultiViewSample> = samples.iter().collect();
    let cached = if frozen {
        Some(features_in_chunks(&model, &refs)?)
    } else {
        None
    };
    let val_y: Vec<usize> = val_idx.iter().map(|&i| labels[i] as usize).collect();

    let mut head_opt = Optimizer::new(opts.optimizer, &model.head);
    let mut emb_opts: Vec<Optimizer> = if frozen {
        Vec::new()
    } else {
        model.embeddings.iter().map(|e| Optimizer::new(opts.optimizer, e)).collect()
    };
    let mut best = model.clone();
    let mut stop = EarlyStop::new();
    let mut report = TrainReport::default();
    for epoch in 0..opts.epochs {
        let mut batches = sampler.epoch(&mut rng);
        if let Some(m) = opts.max_batches {
            batches.truncate(m);
        }
        let mut total = 0.0;
        for b in &batches {
            let idx: Vec<usize> = b.indices().map(|k| train_idx[k]).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i] as usize).collect();
            if let Some(feats) = &cached {
                let x = feats.gather_rows(&idx);
                let (out, tape) = model.head.forward_record(&x, &mut rng)?;
                let (loss, g) = nll_loss(&out, &y)?;
                let mut grads = model.head.backward_tape(&tape, &g)?.params;
                let mut obj = loss;
                if let Some(p) = opts.pnorm {
                    let (pen, pg) = pnorm_penalty(&model.head, p, opts.pnorm_weight);
                    add_param_grads(&mut grads, &pg);
                    obj += pen;
                }
                head_opt.step(&mut model.head, &grads)?;
                total += obj;
            } else {
                total += full_step(&mut model, samples, &idx, &y, &mut head_opt, &mut emb_opts, opts, &mut rng)?;
            }
        }
        let train_loss = total / batches.len().max(1) as f64;
        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let x = match &cached {
                Some(f) => f.gather_rows(&val_idx),
                None => {
                    let vs: Vec<&MultiViewSample> = val_idx.iter().map(|&i| &samples[i]).collect();
                    features_in_chunks(&model, &vs)?
                }
            };
            let (l, c) = loss_and_accuracy(&model.head.forward(&x)?, &val_y)?;
            (l, c as f64 / val_y.len() as f64)
        };
        report.log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if stop.update(epoch, val_loss) {
            best = model.clone();
        }
        if stop.exhausted(opts.patience) {
            break;
        }
    }
    report.best_epoch = stop.best_epoch;
    Ok((best, report))
}

/// Ψ for any number of samples, computed 256 at a time.
pub fn features_in_chunks(model: &MultiViewModel, samples: &[&MultiViewSample]) -> crate::Result<Tensor> {
    let mut parts = Vec::new();
    for chunk in samples.chunks(256) {
        parts.push(model.features(chunk)?);
    }
    let width = model.views() * model.q;
    let mut data = Vec::with_capacity(samples.len() * width);
    for p in parts {
        data.extend(p.into_data());
    }
    Ok(Tensor::new(vec![samples.len(), width], data)?)
}

/// One joint update of head and embeddings.
#[allow(clippy::too_many_arguments)]
fn full_step(
    model: &mut MultiViewModel,
    samples: &[MultiViewSample],
    idx: &[usize],
    y: &[usize],
    head_opt: &mut Optimizer,
    emb_opts: &mut [Optimizer],
    opts: &TrainOptions,
    rng: &mut ChaCha8Rng,
) -> crate::Result<f64> {
    let n = idx.len();
    let mut feats = Vec::with_capacity(model.views());
    let mut tapes = Vec::with_capacity(model.views());
    for v in 0..model.views() {
        let ps: Vec<&Patch> = idx.iter().map(|&i| &samples[i].patches[v]).collect();
        let x = patches_tensor(&ps, &model.crop)?;
        let (out, tape) = model.embeddings[v].forward_record(&x, rng)?;
        feats.push(out.reshaped(vec![n, model.q])?);
        tapes.push(tape);
    }
    let x = Tensor::concat_features(&feats)?;
    let (out, tape) = model.head.forward_record(&x, rng)?;
    let (loss, g) = nll_loss(&out, y)?;
    let hg = model.head.backward_tape(&tape, &g)?;
    let mut head_grads = hg.params;
    let mut obj = loss;
    if let Some(p) = opts.pnorm {
        let (pen, pg) = pnorm_penalty(&model.head, p, opts.pnorm_weight);
        add_param_grads(&mut head_grads, &pg);
        obj += pen;
    }
    let parts = hg.input.split_features(&vec![model.q; model.views()])?;
    for (v, (gpart, tape)) in parts.into_iter().zip(&tapes).enumerate() {
        let shape = model.embeddings[v]
            .output_shape(&[n, 3, model.crop.out_h, model.crop.out_w])?;
        let g = gpart.reshaped(shape)?;
        let mut eg = model.embeddings[v].backward_tape(tape, &g)?.params;
        if let Some(p) = opts.pnorm {
            let (pen, pg) = pnorm_penalty(&model.embeddings[v], p, opts.pnorm_weight);
            add_param_grads(&mut eg, &pg);
            obj += pen;
        }
        emb_opts[v].step(&mut model.embeddings[v], &eg)?;
    }
    head_opt.step(&mut model.head, &head_grads)?;
    Ok(obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CropRect;
    use crate::multiview::{build_multiview, HeadSpec, Provenance};
    use crate::nnet::mono_classifier_layers;
    use rand::Rng;

    fn toy_patch(bright: bool, rng: &mut ChaCha8Rng) -> Patch {
        let mut p = Patch::zeros(32, 32);
        let base = if bright { 0.75 } else { 0.25 };
        p.data.iter_mut().for_each(|v| *v = base + rng.gen_range(-0.1..0.1));
        p
    }

    fn toy_mono(n: usize, seed: u64) -> Vec<MonoSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = u8::from(i % 3 == 0);
                MonoSample {
                    patch: toy_patch(label == 1, &mut rng),
                    label,
                    frame_id: 0,
                    cell: i,
                    view: 0,
                }
            })
            .collect()
    }

    fn toy_mv(n: usize, views: usize, seed: u64) -> Vec<MultiViewSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = u8::from(i % 3 == 0);
                MultiViewSample {
                    patches: (0..views).map(|_| toy_patch(label == 1, &mut rng)).collect(),
                    rects: vec![CropRect::new(0.0, 0.0, 1.0, 1.0); views],
                    label,
                    cell: i,
                    frame_id: 0,
                    provenance: Provenance::Annotated,
                    person: None,
                }
            })
            .collect()
    }

    #[test]
    fn separable_toy_data_is_learned() {
        let data = toy_mono(150, 1);
        let net = Network::new(&mono_classifier_layers(), 2).unwrap();
        let opts = TrainOptions {
            epochs: 20,
            input_dropout: false,
            val_fraction: 0.0,
            ..Default::default()
        };
        let (trained, report) = train_monocular(&net, &data, &CropSpec::default(), &opts).unwrap();
        assert!(!report.log.is_empty());
        let ps: Vec<&Patch> = data.iter().map(|s| &s.patch).collect();
        let out = trained.forward(&patches_tensor(&ps, &CropSpec::default()).unwrap()).unwrap();
        let scores: Vec<f64> = (0..out.batch()).map(|i| out.row(i)[1].exp()).collect();
        let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
        assert!(accuracy_at(&scores, &labels, 0.5) >= 0.99);
    }

    #[test]
    fn zero_epochs_returns_input() {
        let net = Network::new(&mono_classifier_layers(), 2).unwrap();
        let opts = TrainOptions { epochs: 0, ..Default::default() };
        let (same, report) = train_monocular(&net, &toy_mono(30, 1), &CropSpec::default(), &opts).unwrap();
        assert_eq!(same, net);
        assert!(report.log.is_empty());
    }

    #[test]
    fn single_class_is_rejected() {
        let net = Network::new(&mono_classifier_layers(), 2).unwrap();
        let data: Vec<MonoSample> = toy_mono(30, 1).into_iter().filter(|s| s.label == 0).collect();
        assert!(train_monocular(&net, &data, &CropSpec::default(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn frozen_training_leaves_embeddings_untouched() {
        let mono = Network::new(&mono_classifier_layers(), 3).unwrap();
        let model = build_multiview(&mono, 7, &[0, 1], &HeadSpec::desk(), CropSpec::default(), 4).unwrap();
        let before = model.embeddings_checksum();
        let opts = TrainOptions { epochs: 10, patience: None, ..Default::default() };
        let (trained, report) = train_head(&model, &toy_mv(60, 2, 5), &opts).unwrap();
        assert_eq!(report.log.len(), 10);
        assert_eq!(trained.embeddings_checksum(), before);
        assert_ne!(trained.head, model.head);
    }

    #[test]
    fn unfrozen_training_moves_embeddings() {
        let mono = Network::new(&mono_classifier_layers(), 3).unwrap();
        let mut model = build_multiview(&mono, 7, &[0, 1], &HeadSpec::desk(), CropSpec::default(), 4).unwrap();
        model.freeze_embeddings = false;
        let opts = TrainOptions { epochs: 2, patience: None, val_fraction: 0.0, ..Default::default() };
        let (trained, _) = train_head(&model, &toy_mv(40, 2, 5), &opts).unwrap();
        assert_ne!(trained.embeddings_checksum(), model.embeddings_checksum());
        assert_ne!(trained.embeddings[0], trained.embeddings[1]);
    }

    #[test]
    fn training_is_reproducible() {
        let mono = Network::new(&mono_classifier_layers(), 3).unwrap();
        let model = build_multiview(&mono, 7, &[0, 1], &HeadSpec::desk(), CropSpec::default(), 4).unwrap();
        let opts = TrainOptions { epochs: 3, ..Default::default() };
        let data = toy_mv(50, 2, 7);
        let (a, ra) = train_head(&model, &data, &opts).unwrap();
        let (b, rb) = train_head(&model, &data, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}

//! Class-incremental training: per-stage optimization with interleaved
//! replay of condensed exemplars, pooled spatial/flat distillation against
//! the previous model, and CNN / nearest-mean evaluation.

use crate::autodiff::{GradGraph, Tensor};
use crate::condenser::{self, CondenseConfig};
use crate::datagen::{mix_seed, Dataset, VideoClip};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryBank, MemoryConfig};
use crate::model::{self, ModelParams, ModelSnapshot, EMBED_DIM};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Disjoint class sets, one per stage; the base stage is typically larger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub stages: Vec<Vec<u32>>,
}

impl TaskSplit {
    /// Validate disjointness and exact coverage of `0..num_classes`.
    pub fn validate(&self, num_classes: u32) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for stage in &self.stages {
            if stage.is_empty() {
                return Err(Error::Config("task split contains an empty stage".into()));
            }
            for &c in stage {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {} appears in two stages", c)));
                }
            }
        }
        let expect: std::collections::BTreeSet<u32> = (0..num_classes).collect();
        if seen != expect {
            return Err(Error::Config(format!(
                "task split covers {:?}, dataset has classes 0..{}",
                seen, num_classes
            )));
        }
        Ok(())
    }

    pub fn seen_classes(&self, through_stage: usize) -> Vec<u32> {
        let mut seen: Vec<u32> = self.stages[..through_stage].iter().flatten().copied().collect();
        seen.sort_unstable();
        seen
    }
}

/// Per-stage training configuration. The learning rate halves at mid-stage;
/// incremental stages (k ≥ 2) use the separate, smaller rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_incremental: f64,
    pub distillation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 8,
            lr_initial: 0.2,
            lr_incremental: 0.02,
            distillation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.lr_initial <= 0.0 || self.lr_incremental <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, stage: usize, epoch: usize) -> f64 {
        let base = if stage == 1 { self.lr_initial } else { self.lr_incremental };
        if epoch >= self.epochs.div_ceil(2) {
            base / 2.0
        } else {
            base
        }
    }
}

/// Outcome of one incremental stage.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: usize,
    pub seen_classes: usize,
    pub acc_cnn: f64,
    /// NaN when the memory is disabled (no exemplar means exist).
    pub acc_nme: f64,
    pub epoch_losses: Vec<f64>,
    pub memory_mb: f64,
}

/// Batch slot source for interleaved replay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    New,
    Memory,
}

/// Deterministic proportional schedule: `new_count + mem_count` slots whose
/// running ratio tracks `new_count : mem_count` as closely as one slot
/// allows, chunked into batches.
pub fn interleave(new_count: usize, mem_count: usize, batch_size: usize) -> Result<Vec<Vec<SampleSource>>> {
    if new_count == 0 && mem_count == 0 {
        return Err(Error::Domain("interleave requires at least one sample".into()));
    }
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let mut flat = Vec::with_capacity(new_count + mem_count);
    let (mut n_taken, mut m_taken) = (0usize, 0usize);
    for _ in 0..new_count + mem_count {
        // Pick the source whose next sample keeps the realized ratio closest
        // to the target; ties go to new data.
        let take_new = if n_taken == new_count {
            false
        } else if m_taken == mem_count {
            true
        } else {
            (n_taken + 1) * mem_count <= (m_taken + 1) * new_count
        };
        if take_new {
            flat.push(SampleSource::New);
            n_taken += 1;
        } else {
            flat.push(SampleSource::Memory);
            m_taken += 1;
        }
    }
    Ok(flat.chunks(batch_size).map(|c| c.to_vec()).collect())
}

// ── distillation ─────────────────────────────────────────────────────

/// Width/height-pooled spatial distillation over matching stage maps:
/// for each layer, Σ over (channel, row) of the squared difference of
/// width-pooled activations plus the symmetric height-pooled term.
pub fn distill_spatial(new_maps: &[Tensor], old_maps: &[Tensor]) -> Result<f64> {
    if new_maps.len() != old_maps.len() {
        return Err(Error::Dim(format!(
            "stage map count mismatch: {} vs {}",
            new_maps.len(),
            old_maps.len()
        )));
    }
    let mut total = 0.0;
    for (new, old) in new_maps.iter().zip(old_maps) {
        if new.shape != old.shape {
            return Err(Error::Dim(format!(
                "stage map shape mismatch: {:?} vs {:?}",
                new.shape, old.shape
            )));
        }
        let (n, c, h, w) = (new.shape[0], new.shape[1], new.shape[2], new.shape[3]);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for y in 0..h {
                    let mut dn = 0.0;
                    let mut dold = 0.0;
                    for x in 0..w {
                        dn += new.data[base + y * w + x];
                        dold += old.data[base + y * w + x];
                    }
                    total += (dn - dold) * (dn - dold);
                }
                for x in 0..w {
                    let mut dn = 0.0;
                    let mut dold = 0.0;
                    for y in 0..h {
                        dn += new.data[base + y * w + x];
                        dold += old.data[base + y * w + x];
                    }
                    total += (dn - dold) * (dn - dold);
                }
            }
        }
    }
    Ok(total)
}

/// Training-time spatial distillation term: each pooled difference is
/// divided by the old model's pooled squared norm. The raw sum form of
/// [`distill_spatial`] has curvature proportional to the pooled magnitudes
/// (hundreds here), which no usable learning rate survives; the reference
/// pooled-distillation method normalizes its pooled features for the same
/// reason. Normalizing by a constant keeps gradients exact and bounded.
pub fn distill_spatial_normalized(new_maps: &[Tensor], old_maps: &[Tensor]) -> Result<f64> {
    if new_maps.len() != old_maps.len() {
        return Err(Error::Dim(format!(
            "stage map count mismatch: {} vs {}",
            new_maps.len(),
            old_maps.len()
        )));
    }
    let mut total = 0.0;
    for (new, old) in new_maps.iter().zip(old_maps) {
        if new.shape != old.shape {
            return Err(Error::Dim(format!(
                "stage map shape mismatch: {:?} vs {:?}",
                new.shape, old.shape
            )));
        }
        for axis in [3usize, 2usize] {
            let pn = pool_axis(new, axis)?;
            let po = pool_axis(old, axis)?;
            let diff: f64 = pn.data.iter().zip(&po.data).map(|(a, b)| (a - b) * (a - b)).sum();
            let norm2: f64 = po.data.iter().map(|v| v * v).sum::<f64>().max(1e-12);
            total += diff / norm2;
        }
    }
    Ok(total)
}

/// Squared L2 distance between clip embeddings (sum convention).
pub fn distill_flat(new_embedding: &Tensor, old_embedding: &Tensor) -> Result<f64> {
    if new_embedding.shape != old_embedding.shape {
        return Err(Error::Dim(format!(
            "embedding shape mismatch: {:?} vs {:?}",
            new_embedding.shape, old_embedding.shape
        )));
    }
    Ok(new_embedding
        .data
        .iter()
        .zip(&old_embedding.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Classic heavy-ball momentum for the stage optimizer; fresh per stage.
const MODEL_MOMENTUM: f64 = 0.9;

struct Momentum {
    velocity: Vec<Vec<f64>>,
    mu: f64,
}

impl Momentum {
    fn new(params: &ModelParams) -> Self {
        Self::with_mu(params, MODEL_MOMENTUM)
    }

    fn with_mu(params: &ModelParams, mu: f64) -> Self {
        Momentum {
            velocity: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
            mu,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>], lr: f64) {
        for ((tensor, vel), grad) in params.tensors_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            if let Some(grad) = grad {
                for ((w, v), g) in tensor.data.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = self.mu * *v + g;
                    *w -= lr * *v;
                }
            }
        }
    }
}

/// Old-model features cached per memory exemplar for a whole stage.
struct OldFeatures {
    stage1: Tensor,
    stage2: Tensor,
    embedding: Tensor,
}

/// One replayable sample.
struct MemSample {
    input: Tensor,
    label: usize,
    old: Option<OldFeatures>,
}

struct BatchLoss {
    value: f64,
}

/// Build and optimize one batch; returns the batch loss value.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    params: &mut ModelParams,
    momentum: &mut Momentum,
    new_inputs: &[(&Tensor, usize)],
    mem_inputs: &[&MemSample],
    distillation: bool,
    lr: f64,
) -> Result<BatchLoss> {
    let mut g = GradGraph::new();
    let pn = model::add_params(&mut g, params, true);

    let group_mean = |g: &mut GradGraph, nodes: Vec<crate::autodiff::NodeId>| -> Result<Option<crate::autodiff::NodeId>> {
        if nodes.is_empty() {
            return Ok(None);
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = g.add(acc, n)?;
        }
        Ok(Some(g.scale(acc, 1.0 / nodes.len() as f64)))
    };

    let mut new_ce = Vec::new();
    for (input, label) in new_inputs {
        let input_node = g.constant((*input).clone());
        let f = model::features_graph(&mut g, &pn, input_node)?;
        let logits = model::classify_graph(&mut g, &pn, f.embedding)?;
        new_ce.push(g.cross_entropy(logits, *label)?);
    }

    let mut mem_ce = Vec::new();
    let mut dist_terms = Vec::new();
    for sample in mem_inputs {
        let input_node = g.constant(sample.input.clone());
        let f = model::features_graph(&mut g, &pn, input_node)?;
        let logits = model::classify_graph(&mut g, &pn, f.embedding)?;
        mem_ce.push(g.cross_entropy(logits, sample.label)?);
        if distillation {
            if let Some(old) = &sample.old {
                let mut terms = Vec::new();
                // width/height-pooled squared differences per stage map,
                // each normalized by the old pooled squared norm
                for (node, old_map) in [(f.stage1, &old.stage1), (f.stage2, &old.stage2)] {
                    for axis in [3usize, 2usize] {
                        let pooled = g.sum_axis(node, axis)?;
                        let old_pooled = pool_axis(old_map, axis)?;
                        let norm2 = old_pooled.data.iter().map(|v| v * v).sum::<f64>().max(1e-12);
                        let target = g.constant(old_pooled);
                        let n = g.value(pooled).numel();
                        let m = g.mse(pooled, target)?;
                        terms.push(g.scale(m, n as f64 / norm2));
                    }
                }
                let old_emb = g.constant(old.embedding.clone());
                let m = g.mse(f.embedding, old_emb)?;
                terms.push(g.scale(m, EMBED_DIM as f64));
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t)?;
                }
                dist_terms.push(acc);
            }
        }
    }

    let new_term = group_mean(&mut g, new_ce)?;
    let mem_term = group_mean(&mut g, mem_ce)?;
    let dist_term = group_mean(&mut g, dist_terms)?;
    let mut total = None;
    for term in [new_term, mem_term, dist_term].into_iter().flatten() {
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
    let value = g.scalar_value(total);
    if !value.is_finite() {
        return Err(Error::Optim { step: 0, msg: format!("non-finite batch loss {}", value) });
    }

    g.backward(total)?;
    let grads: Vec<Option<Vec<f64>>> = [
        pn.conv1_kernel,
        pn.conv1_bias,
        pn.conv2_kernel,
        pn.conv2_bias,
        pn.head_weight,
        pn.head_bias,
    ]
    .iter()
    .map(|&n| g.grad(n).map(|s| s.to_vec()))
    .collect();
    momentum.step(params, &grads, lr);
    Ok(BatchLoss { value })
}

/// Value-level pooled sum over one axis of a `[T, C, H, W]` tensor.
fn pool_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = GradGraph::new();
    let n = g.constant(t.clone());
    let s = g.sum_axis(n, axis)?;
    Ok(g.value(s).clone())
}

/// The combined stage loss on explicit batches, outside any training loop.
/// Cross-entropy terms average within their group; distillation terms
/// (normalized spatial plus flat embedding) are computed on memory
/// exemplars only and require the old model.
pub fn cil_loss(
    new_batch: &[(&VideoClip, usize)],
    mem_batch: &[(&Tensor, usize)],
    params: &ModelParams,
    old_model: Option<&ModelSnapshot>,
) -> Result<f64> {
    let mut total = 0.0;
    if !new_batch.is_empty() {
        let mut s = 0.0;
        for (clip, label) in new_batch {
            let t = clip.to_tensor();
            let bundle = model::extract_features(params, &t)?;
            let logits = model::classify(params, &bundle)?;
            s += ce_value(&logits, *label)?;
        }
        total += s / new_batch.len() as f64;
    }
    if !mem_batch.is_empty() {
        let mut s = 0.0;
        let mut d = 0.0;
        for (input, label) in mem_batch {
            let bundle = model::extract_features(params, input)?;
            let logits = model::classify(params, &bundle)?;
            s += ce_value(&logits, *label)?;
            if let Some(old) = old_model {
                let old_bundle = model::extract_features(old.params(), input)?;
                d += distill_spatial_normalized(&bundle.stage_maps, &old_bundle.stage_maps)?;
                d += distill_flat(&bundle.embedding, &old_bundle.embedding)?;
            }
        }
        total += s / mem_batch.len() as f64;
        if old_model.is_some() {
            total += d / mem_batch.len() as f64;
        }
    }
    Ok(total)
}

fn ce_value(logits: &Tensor, label: usize) -> Result<f64> {
    let mut g = GradGraph::new();
    let l = g.constant(logits.clone());
    let ce = g.cross_entropy(l, label)?;
    Ok(g.scalar_value(ce))
}

// ── evaluation ───────────────────────────────────────────────────────

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of the live classification head on a test set.
pub fn evaluate_cnn(params: &ModelParams, testset: &[&VideoClip]) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty test set".into()));
    }
    let mut correct = 0usize;
    for clip in testset {
        let bundle = model::extract_features(params, &clip.to_tensor())?;
        let logits = model::classify(params, &bundle)?;
        if argmax(&logits.data) == clip.label as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}

/// Nearest-mean-of-exemplars accuracy: each test clip is assigned the class
/// whose exemplar-mean embedding is closest.
pub fn evaluate_nme(params: &ModelParams, bank: &MemoryBank, testset: &[&VideoClip]) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty test set".into()));
    }
    let seen: std::collections::BTreeSet<u32> = testset.iter().map(|c| c.label).collect();
    let have: std::collections::BTreeSet<u32> = bank.class_ids().into_iter().collect();
    if !seen.is_subset(&have) {
        return Err(Error::Domain(format!(
            "bank covers classes {:?} but the test set needs {:?}",
            have, seen
        )));
    }
    let means = memory::class_means(bank, params)?;
    let mut correct = 0usize;
    for clip in testset {
        let emb = model::extract_features(params, &clip.to_tensor())?.embedding;
        let mut best_class = 0u32;
        let mut best_dist = f64::INFINITY;
        for (&class, mean) in &means {
            let dist: f64 = emb.data.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best_dist {
                best_dist = dist;
                best_class = class;
            }
        }
        if best_class == clip.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / testset.len() as f64)
}

/// Arithmetic mean of per-stage accuracies, base stage included.
pub fn average_accuracy(per_stage: &[f64]) -> f64 {
    if per_stage.is_empty() {
        return f64::NAN;
    }
    per_stage.iter().sum::<f64>() / per_stage.len() as f64
}

// ── stage runner ─────────────────────────────────────────────────────

/// Drives the stage sequence; owns the model and the memory bank.
pub struct StageRunner {
    pub model: ModelParams,
    pub bank: MemoryBank,
    split: TaskSplit,
    completed: usize,
    seed: u64,
}

impl StageRunner {
    /// `videos_per_class = 0` disables the memory entirely (the finetuning
    /// baseline).
    pub fn new(
        dataset_channels: usize,
        shift_fold: f64,
        split: TaskSplit,
        memory: MemoryConfig,
        seed: u64,
    ) -> Result<Self> {
        let model = ModelParams::init(dataset_channels, 0, shift_fold, mix_seed(seed, &[0]))?;
        Ok(StageRunner { model, bank: MemoryBank::new(memory), split, completed: 0, seed })
    }

    pub fn completed_stages(&self) -> usize {
        self.completed
    }

    /// Run stage `k` (1-based): snapshot, extend the head, train with
    /// interleaved replay, condense and store this stage's exemplars, then
    /// evaluate on all seen classes.
    pub fn run_stage(
        &mut self,
        k: usize,
        dataset: &Dataset,
        train_cfg: &TrainConfig,
        condense_cfg: &CondenseConfig,
    ) -> Result<StageReport> {
        train_cfg.validate()?;
        if k != self.completed + 1 {
            return Err(Error::Contract(format!(
                "stage {} requested but {} stages completed",
                k, self.completed
            )));
        }
        if k > self.split.stages.len() {
            return Err(Error::Contract(format!("stage {} beyond the {}-stage split", k, self.split.stages.len())));
        }
        let stage_classes = self.split.stages[k - 1].clone();

        // Snapshot before the head grows; feature extractors stay directly
        // comparable for distillation.
        let old_model = (k >= 2).then(|| self.model.snapshot());
        self.model = self.model.extend_head(stage_classes.len(), mix_seed(self.seed, &[1, k as u64]))?;

        // Head indices equal class ids because splits cover classes in
        // stage order; map defensively anyway.
        let seen = self.split.seen_classes(k);
        let head_index = |class: u32| -> usize {
            seen.iter().position(|&c| c == class).expect("class is seen")
        };

        let new_clips: Vec<&VideoClip> = dataset.train_of_classes(&stage_classes);
        let new_tensors: Vec<(Tensor, usize)> = new_clips
            .iter()
            .map(|c| (c.to_tensor(), head_index(c.label)))
            .collect();

        // Replay pool with per-stage cached old-model features.
        let mut mem_samples: Vec<MemSample> = Vec::new();
        for ex in self.bank.exemplars() {
            let input = ex.to_replay_tensor();
            let old = match (&old_model, train_cfg.distillation) {
                (Some(snap), true) => {
                    let b = model::extract_features(snap.params(), &input)?;
                    Some(OldFeatures {
                        stage1: b.stage_maps[0].clone(),
                        stage2: b.stage_maps[1].clone(),
                        embedding: b.embedding.clone(),
                    })
                }
                _ => None,
            };
            mem_samples.push(MemSample { input, label: head_index(ex.label), old });
        }

        // Training epochs with the proportional schedule.
        // TEMP tuning hook: override incremental-stage momentum via env.
        let mu = if k >= 2 {
            std::env::var("CONDENSA_TUNE_MU").ok().and_then(|v| v.parse().ok()).unwrap_or(MODEL_MOMENTUM)
        } else {
            MODEL_MOMENTUM
        };
        let mut momentum = Momentum::with_mu(&self.model, mu);
        let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
        for epoch in 0..train_cfg.epochs {
            let lr = train_cfg.lr_at(k, epoch);
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(self.seed, &[2, k as u64, epoch as u64]));
            let mut new_order: Vec<usize> = (0..new_tensors.len()).collect();
            new_order.shuffle(&mut rng);
            let mut mem_order: Vec<usize> = (0..mem_samples.len()).collect();
            mem_order.shuffle(&mut rng);

            let schedule = interleave(new_order.len(), mem_order.len(), train_cfg.batch_size)?;
            let (mut ni, mut mi) = (0usize, 0usize);
            let mut loss_sum = 0.0;
            for batch in &schedule {
                let mut new_batch: Vec<(&Tensor, usize)> = Vec::new();
                let mut mem_batch: Vec<&MemSample> = Vec::new();
                for src in batch {
                    match src {
                        SampleSource::New => {
                            let (t, l) = &new_tensors[new_order[ni]];
                            new_batch.push((t, *l));
                            ni += 1;
                        }
                        SampleSource::Memory => {
                            mem_batch.push(&mem_samples[mem_order[mi]]);
                            mi += 1;
                        }
                    }
                }
                let loss = train_batch(&mut self.model, &mut momentum, &new_batch, &mem_batch, train_cfg.distillation, lr)?;
                loss_sum += loss.value;
            }
            epoch_losses.push(loss_sum / schedule.len() as f64);
        }

        // Condense this stage's exemplars on the freshly trained model.
        let videos_per_class = self.bank.config().map_or(0, |c| c.videos_per_class) as usize;
        if videos_per_class > 0 {
            let mut selected: Vec<(u32, Vec<&VideoClip>)> = Vec::new();
            for &class in &stage_classes {
                let clips = dataset.train_of_classes(&[class]);
                let embeddings: Vec<Vec<f64>> = clips
                    .iter()
                    .map(|c| {
                        model::extract_features(&self.model, &c.to_tensor()).map(|b| b.embedding.data)
                    })
                    .collect::<Result<_>>()?;
                let m = videos_per_class.min(clips.len());
                let order = memory::herding_select(&embeddings, m)?;
                selected.push((class, order.into_iter().map(|i| clips[i]).collect()));
            }
            let exemplars = condenser::condense_stage(
                &selected,
                &self.model,
                condense_cfg,
                mix_seed(self.seed, &[3, k as u64]),
            )?;
            for (class, ex) in exemplars {
                debug_assert_eq!(class, ex.label);
                self.bank.insert(k as u32, ex)?;
            }
        }

        // Evaluate over everything seen so far.
        let test_clips: Vec<&VideoClip> = dataset.test_of_classes(&seen);
        let acc_cnn = evaluate_cnn(&self.model, &test_clips)?;
        let acc_nme = if self.bank.is_empty() {
            f64::NAN
        } else {
            evaluate_nme(&self.model, &self.bank, &test_clips)?
        };

        self.completed = k;
        Ok(StageReport {
            stage: k,
            seen_classes: seen.len(),
            acc_cnn,
            acc_nme,
            epoch_losses,
            memory_mb: self.bank.total_megabytes(),
        })
    }
}

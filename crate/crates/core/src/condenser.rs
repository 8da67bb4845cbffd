//! Frame condensing and instance-specific prompting.
//!
//! Per exemplar video, learnable per-frame logits turn the clip into a single
//! softmax-weighted frame, and a pixel-space prompt of the same resolution is
//! added on top. Both are optimized jointly against a four-term objective:
//! feature consistency and classification confidence for the condensed frame
//! alone and for the prompted frame, each under its own balance weight. The
//! finished exemplar stores the prompted frame only.

use crate::autodiff::{GradGraph, NodeId, Tensor};
use crate::datagen::VideoClip;
use crate::error::{Error, Result};
use crate::memory::{CondensedExemplar, LossAudit, PixelData};
use crate::model::{self, ModelParams, EMBED_DIM};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Prompt sharing granularity. Instance-specific is the default; class- and
/// task-shared variants exist for the coarser ablations, and `Disabled`
/// reduces the pipeline to condensing alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Instance,
    Class,
    Task,
    Disabled,
}

/// What gets stored per exemplar video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Learned weighted sum of the frames.
    Condensed,
    /// Plain average of the frames.
    Average,
    /// One frame picked uniformly with the run seed.
    Random,
    /// The whole clip, bypassing condensing.
    All,
}

/// Balance weights for the four objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, eta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma, self.eta].iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Domain("balance weights must be nonnegative and finite".into()));
        }
        Ok(())
    }
}

/// The four objective terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_c_f: f64,
    pub l_c_ce: f64,
    pub l_p_f: f64,
    pub l_p_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_c_f: f64, l_c_ce: f64, l_p_f: f64, l_p_ce: f64, lw: &LossWeights) -> Self {
        LossBreakdown {
            l_c_f,
            l_c_ce,
            l_p_f,
            l_p_ce,
            total: total_objective(l_c_f, l_c_ce, l_p_f, l_p_ce, lw),
        }
    }
}

/// Weighted sum of the four terms.
pub fn total_objective(l_c_f: f64, l_c_ce: f64, l_p_f: f64, l_p_ce: f64, lw: &LossWeights) -> f64 {
    lw.alpha * l_c_f + lw.beta * l_c_ce + lw.gamma * l_p_f + lw.eta * l_p_ce
}

/// Condensing configuration. Desk-scale defaults; the paper-scale iteration
/// count is 8000.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondenseConfig {
    pub iterations: usize,
    pub lr_weights: f64,
    pub lr_prompt: f64,
    pub loss_weights: LossWeights,
    pub prompt_mode: PromptMode,
    pub strategy: Strategy,
    /// Keep float pixels instead of quantizing to bytes (quantization-loss
    /// ablation).
    pub store_float: bool,
}

impl Default for CondenseConfig {
    fn default() -> Self {
        CondenseConfig {
            iterations: 400,
            lr_weights: 0.01,
            lr_prompt: 0.001,
            loss_weights: LossWeights::default(),
            prompt_mode: PromptMode::Instance,
            strategy: Strategy::Condensed,
            store_float: false,
        }
    }
}

impl CondenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_weights <= 0.0 || self.lr_prompt <= 0.0 {
            return Err(Error::Domain("condensing learning rates must be positive".into()));
        }
        self.loss_weights.validate()
    }

    pub fn prompt_enabled(&self) -> bool {
        self.prompt_mode != PromptMode::Disabled && self.strategy != Strategy::All
    }
}

/// Learnable state for one exemplar: raw per-frame logits plus the prompt.
#[derive(Clone, Debug)]
pub struct CondenseState {
    pub weights: Tensor, // [T] logits
    pub prompt: Tensor,  // [C, H, W]
    pub step: usize,
}

// ── core ops ─────────────────────────────────────────────────────────

/// Softmax-weighted sum of the frames: `Σ_t softmax(w)_t · frame_t`.
pub fn condense_frame(weight_logits: &Tensor, frames: &Tensor) -> Result<Tensor> {
    if frames.shape.len() != 4 {
        return Err(Error::Dim(format!("expected [T,C,H,W] frames, got {:?}", frames.shape)));
    }
    if frames.shape[0] == 0 {
        return Err(Error::Domain("cannot condense a clip with zero frames".into()));
    }
    if weight_logits.shape != vec![frames.shape[0]] {
        return Err(Error::Dim(format!(
            "weight logits {:?} do not match {} frames",
            weight_logits.shape, frames.shape[0]
        )));
    }
    let mut g = GradGraph::new();
    let w = g.leaf(weight_logits.clone());
    let f = g.leaf(frames.clone());
    let sw = g.softmax(w, 0)?;
    let out = g.weighted_sum(sw, f)?;
    Ok(g.value(out).clone())
}

/// Normalized weights for audit purposes.
pub fn normalized_weights(weight_logits: &Tensor) -> Vec<f64> {
    let m = weight_logits.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weight_logits.data.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Feature-consistency and classification losses of a frame against its
/// source clip: squared embedding distance of the replicated frame to the
/// clip, and cross-entropy of the head on the frame.
pub fn condensing_loss(
    frame: &Tensor,
    clip: &Tensor,
    label: usize,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    let target = model::extract_features(params, clip)?.embedding;
    let mut g = GradGraph::new();
    let pn = model::add_params(&mut g, params, false);
    let frame_node = g.constant(frame.clone());
    let (l_f, l_ce) = frame_losses(&mut g, &pn, frame_node, clip.shape[0], &target, label)?;
    Ok((g.scalar_value(l_f), g.scalar_value(l_ce)))
}

/// Same contract as [`condensing_loss`] with the prompt added to the frame.
pub fn prompt_loss(
    frame: &Tensor,
    prompt: &Tensor,
    clip: &Tensor,
    label: usize,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    if prompt.shape != frame.shape {
        return Err(Error::Dim(format!(
            "prompt shape {:?} does not match frame shape {:?}",
            prompt.shape, frame.shape
        )));
    }
    let summed = Tensor::new(
        frame.shape.clone(),
        frame.data.iter().zip(&prompt.data).map(|(a, b)| a + b).collect(),
    )?;
    condensing_loss(&summed, clip, label, params)
}

/// Extract the replicated-frame embedding and emit the two loss nodes.
fn frame_losses(
    g: &mut GradGraph,
    pn: &model::ParamNodes,
    frame: NodeId,
    t: usize,
    target_embedding: &Tensor,
    label: usize,
) -> Result<(NodeId, NodeId)> {
    let embedding = model::replicated_features_graph(g, pn, frame, t)?;
    let target = g.constant(target_embedding.clone());
    let mse = g.mse(embedding, target)?;
    let l_f = g.scale(mse, EMBED_DIM as f64); // squared L2, sum convention
    let logits = model::classify_graph(g, pn, embedding)?;
    let l_ce = g.cross_entropy(logits, label)?;
    Ok((l_f, l_ce))
}

/// Scalar nodes of one optimization step's objective.
struct StepNodes {
    total: NodeId,
    l_c_f: f64,
    l_c_ce: f64,
    l_p_f: f64,
    l_p_ce: f64,
}

/// Build the full objective for one step. `weights` must be a `[T]` logits
/// node when the strategy condenses; otherwise `fixed_frame` supplies the
/// frame directly. `prompt` joins the second loss pair when present.
#[allow(clippy::too_many_arguments)]
fn objective_graph(
    g: &mut GradGraph,
    params: &ModelParams,
    clip: &Tensor,
    target_embedding: &Tensor,
    label: usize,
    lw: &LossWeights,
    frame_source: FrameSource,
    prompt: Option<NodeId>,
    fixed_condensed_losses: Option<(f64, f64)>,
) -> Result<StepNodes> {
    let t = clip.shape[0];
    let pn = model::add_params(g, params, false);
    let frame = match frame_source {
        FrameSource::Weights(w) => {
            let frames_const = g.constant(clip.clone());
            let sw = g.softmax(w, 0)?;
            g.weighted_sum(sw, frames_const)?
        }
        FrameSource::Frame(f) => f,
    };

    // Condensed-path losses: recomputed in-graph while the frame is being
    // learned, constant otherwise.
    let (l_c_f_node, l_c_ce_node, l_c_f, l_c_ce) = match fixed_condensed_losses {
        Some((f, ce)) => (None, None, f, ce),
        None => {
            let (lf, lce) = frame_losses(g, &pn, frame, t, target_embedding, label)?;
            (Some(lf), Some(lce), g.scalar_value(lf), g.scalar_value(lce))
        }
    };

    // Prompt-path losses.
    let (l_p_f_node, l_p_ce_node, l_p_f, l_p_ce) = match prompt {
        Some(p) => {
            let summed = g.add(frame, p)?;
            let (lf, lce) = frame_losses(g, &pn, summed, t, target_embedding, label)?;
            (Some(lf), Some(lce), g.scalar_value(lf), g.scalar_value(lce))
        }
        None => (None, None, 0.0, 0.0),
    };

    // total = α·L_f^c + β·L_ce^c + γ·L_f^p + η·L_ce^p, composed from the
    // nodes that actually carry gradients.
    let mut total: Option<NodeId> = None;
    let mut accumulate = |g: &mut GradGraph, node: Option<NodeId>, weight: f64, value: f64| -> Result<()> {
        let term = match node {
            Some(n) => g.scale(n, weight),
            None => g.constant(Tensor::scalar(weight * value)),
        };
        total = Some(match total {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
        Ok(())
    };
    accumulate(g, l_c_f_node, lw.alpha, l_c_f)?;
    accumulate(g, l_c_ce_node, lw.beta, l_c_ce)?;
    accumulate(g, l_p_f_node, lw.gamma, l_p_f)?;
    accumulate(g, l_p_ce_node, lw.eta, l_p_ce)?;

    Ok(StepNodes { total: total.unwrap(), l_c_f, l_c_ce, l_p_f, l_p_ce })
}

enum FrameSource {
    Weights(NodeId),
    Frame(NodeId),
}

/// Full four-term objective for a weights-driven condensing step, exposed
/// for gradient checking. Returns the scalar total node.
#[allow(clippy::too_many_arguments)]
pub fn objective_total_for_check(
    g: &mut GradGraph,
    params: &ModelParams,
    clip: &Tensor,
    target_embedding: &Tensor,
    label: usize,
    lw: &LossWeights,
    weights: NodeId,
    prompt: Option<NodeId>,
) -> Result<NodeId> {
    let nodes = objective_graph(
        g,
        params,
        clip,
        target_embedding,
        label,
        lw,
        FrameSource::Weights(weights),
        prompt,
        None,
    )?;
    Ok(nodes.total)
}

/// Result of optimizing one exemplar before finalization.
pub struct InstanceOutcome {
    pub base_frame: Tensor,
    pub weights_norm: Vec<f64>,
    pub prompt: Tensor,
    pub initial: LossBreakdown,
    pub last: LossBreakdown,
}

/// Run the per-exemplar optimization: joint plain-SGD updates of the
/// condensing logits (lr_weights) and the prompt (lr_prompt) from zero
/// initializations, for `cfg.iterations` steps.
fn optimize_instance(
    clip: &VideoClip,
    label: usize,
    params: &ModelParams,
    cfg: &CondenseConfig,
    seed: u64,
    prompt_init: Tensor,
) -> Result<InstanceOutcome> {
    cfg.validate()?;
    let clip_tensor = clip.to_tensor();
    let t = clip.frames;
    let frame_shape = vec![clip.channels, clip.height, clip.width];
    let target = model::extract_features(params, &clip_tensor)?.embedding;
    let lw = &cfg.loss_weights;
    let prompt_on = cfg.prompt_enabled();

    // Fixed base frame for the non-learned strategies.
    let (learn_weights, fixed_frame, weights_norm_fixed) = match cfg.strategy {
        Strategy::Condensed => (true, None, None),
        Strategy::Average => {
            let logits = Tensor::zeros(vec![t]);
            let frame = condense_frame(&logits, &clip_tensor)?;
            (false, Some(frame), Some(vec![1.0 / t as f64; t]))
        }
        Strategy::Random => {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let pick = rng.random_range(0..t);
            let frame_len = frame_shape.iter().product::<usize>();
            let data = clip_tensor.data[pick * frame_len..(pick + 1) * frame_len].to_vec();
            let frame = Tensor::new(frame_shape.clone(), data)?;
            let mut one_hot = vec![0.0; t];
            one_hot[pick] = 1.0;
            (false, Some(frame), Some(one_hot))
        }
        Strategy::All => {
            return Err(Error::Contract("the all-frames strategy does not optimize".into()))
        }
    };

    let mut weights = Tensor::zeros(vec![t]).with_grad();
    let mut prompt = prompt_init;
    if prompt.shape != frame_shape {
        return Err(Error::Dim(format!(
            "prompt shape {:?} does not match frame shape {:?}",
            prompt.shape, frame_shape
        )));
    }
    prompt.requires_grad = true;

    // When the frame is fixed, its condensed-path losses never change; price
    // them once.
    let fixed_losses = match &fixed_frame {
        Some(frame) => Some(condensing_loss(frame, &clip_tensor, label, params)?),
        None => None,
    };

    let eval_and_maybe_step =
        |weights: &mut Tensor, prompt: &mut Tensor, do_update: bool, step: usize| -> Result<LossBreakdown> {
            let mut g = GradGraph::new();
            let w_node = if learn_weights { Some(g.leaf(weights.clone())) } else { None };
            let frame_source = match (&fixed_frame, w_node) {
                (Some(f), _) => FrameSource::Frame(g.constant(f.clone())),
                (None, Some(w)) => FrameSource::Weights(w),
                _ => unreachable!(),
            };
            let p_node = if prompt_on { Some(g.leaf(prompt.clone())) } else { None };
            let nodes = objective_graph(
                &mut g,
                params,
                &clip_tensor,
                &target,
                label,
                lw,
                frame_source,
                p_node,
                fixed_losses,
            )?;
            let breakdown = LossBreakdown::new(nodes.l_c_f, nodes.l_c_ce, nodes.l_p_f, nodes.l_p_ce, lw);
            if !breakdown.total.is_finite() {
                return Err(Error::Optim { step, msg: format!("non-finite objective {:?}", breakdown) });
            }
            if do_update {
                g.backward(nodes.total)?;
                if let Some(w) = w_node {
                    if let Some(gw) = g.grad(w) {
                        for (v, d) in weights.data.iter_mut().zip(gw) {
                            *v -= cfg.lr_weights * d;
                        }
                    }
                }
                if let Some(p) = p_node {
                    if let Some(gp) = g.grad(p) {
                        for (v, d) in prompt.data.iter_mut().zip(gp) {
                            *v -= cfg.lr_prompt * d;
                        }
                    }
                }
            }
            Ok(breakdown)
        };

    let mut initial = None;
    for step in 0..cfg.iterations {
        let breakdown = eval_and_maybe_step(&mut weights, &mut prompt, true, step)?;
        if step == 0 {
            initial = Some(breakdown);
        }
    }
    let last = eval_and_maybe_step(&mut weights, &mut prompt, false, cfg.iterations)?;
    let initial = initial.unwrap_or(last);

    let base_frame = match fixed_frame {
        Some(f) => f,
        None => condense_frame(&weights, &clip_tensor)?,
    };
    let weights_norm = weights_norm_fixed.unwrap_or_else(|| normalized_weights(&weights));
    prompt.requires_grad = false;
    Ok(InstanceOutcome { base_frame, weights_norm, prompt, initial, last })
}

/// Quantize a [0, 1] value to a byte, rounding half up.
pub fn quantize_pixel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bake the prompt into the frame and freeze the exemplar. Stored pixels are
/// `quantize(clamp(frame + prompt, 0, 1) × 255)` unless float storage is
/// requested, in which case the clamped floats are kept.
pub fn finalize_frame(
    base_frame: &Tensor,
    prompt: Option<&Tensor>,
    weights_norm: &[f64],
    clip: &VideoClip,
    store_float: bool,
    audit: Option<LossAudit>,
) -> CondensedExemplar {
    let summed: Vec<f64> = match prompt {
        Some(p) => base_frame.data.iter().zip(&p.data).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect(),
        None => base_frame.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    };
    let pixels = if store_float {
        PixelData::Floats(summed.iter().map(|&v| v as f32).collect())
    } else {
        PixelData::Bytes(summed.iter().map(|&v| quantize_pixel(v)).collect())
    };
    CondensedExemplar {
        label: clip.label,
        channels: clip.channels,
        height: clip.height,
        width: clip.width,
        clip_frames: clip.frames,
        stored_frames: 1,
        pixels,
        weights_audit: weights_norm.iter().map(|&w| w as f32).collect(),
        loss_audit: audit,
    }
}

/// Finalize from an explicit condensing state (weights + prompt).
pub fn finalize_exemplar(
    state: &CondenseState,
    clip: &VideoClip,
    store_float: bool,
    audit: Option<LossAudit>,
) -> Result<CondensedExemplar> {
    let frame = condense_frame(&state.weights, &clip.to_tensor())?;
    Ok(finalize_frame(
        &frame,
        Some(&state.prompt),
        &normalized_weights(&state.weights),
        clip,
        store_float,
        audit,
    ))
}

/// Store the whole clip unchanged (the all-frames baseline).
pub fn store_all_frames(clip: &VideoClip) -> CondensedExemplar {
    CondensedExemplar {
        label: clip.label,
        channels: clip.channels,
        height: clip.height,
        width: clip.width,
        clip_frames: clip.frames,
        stored_frames: clip.frames,
        pixels: PixelData::Bytes(clip.pixels.clone()),
        weights_audit: vec![1.0 / clip.frames as f32; clip.frames],
        loss_audit: None,
    }
}

/// Optimize and finalize a single exemplar with its own prompt.
pub fn optimize_exemplar(
    clip: &VideoClip,
    label: usize,
    params: &ModelParams,
    cfg: &CondenseConfig,
    seed: u64,
) -> Result<CondensedExemplar> {
    if cfg.strategy == Strategy::All {
        return Ok(store_all_frames(clip));
    }
    let prompt_init = Tensor::zeros(vec![clip.channels, clip.height, clip.width]);
    let outcome = optimize_instance(clip, label, params, cfg, seed, prompt_init)?;
    let prompt = cfg.prompt_enabled().then_some(&outcome.prompt);
    Ok(finalize_frame(
        &outcome.base_frame,
        prompt,
        &outcome.weights_norm,
        clip,
        cfg.store_float,
        Some(LossAudit { initial: outcome.initial, last: outcome.last }),
    ))
}

/// Condense the selected exemplars of one stage.
///
/// `selected` holds (class, clips in selection order) pairs. Prompt sharing
/// follows `cfg.prompt_mode`: instance-specific prompts are independent (and
/// run in parallel), class- and task-shared prompts are threaded through
/// their group sequentially and every member is finalized with the group's
/// final prompt.
pub fn condense_stage(
    selected: &[(u32, Vec<&VideoClip>)],
    params: &ModelParams,
    cfg: &CondenseConfig,
    seed: u64,
) -> Result<Vec<(u32, CondensedExemplar)>> {
    if cfg.strategy == Strategy::All {
        return Ok(selected
            .iter()
            .flat_map(|(class, clips)| clips.iter().map(|c| (*class, store_all_frames(c))))
            .collect());
    }

    // (class, clip, per-exemplar seed) in deterministic stage order.
    let mut flat: Vec<(u32, &VideoClip, u64)> = Vec::new();
    for (class, clips) in selected {
        for clip in clips {
            let s = crate::datagen::mix_seed(seed, &[u64::from(*class), flat.len() as u64]);
            flat.push((*class, clip, s));
        }
    }

    let share_group = |class: u32| -> u64 {
        match cfg.prompt_mode {
            PromptMode::Task => 0,
            PromptMode::Class => 1 + u64::from(class),
            PromptMode::Instance | PromptMode::Disabled => u64::MAX, // unused
        }
    };

    let grouped: Vec<Vec<usize>> = match cfg.prompt_mode {
        PromptMode::Instance | PromptMode::Disabled => (0..flat.len()).map(|i| vec![i]).collect(),
        _ => {
            let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
            for (i, (class, _, _)) in flat.iter().enumerate() {
                let key = share_group(*class);
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(i),
                    None => groups.push((key, vec![i])),
                }
            }
            groups.into_iter().map(|(_, v)| v).collect()
        }
    };

    let results: Result<Vec<Vec<(usize, CondensedExemplar)>>> = grouped
        .par_iter()
        .map(|group| {
            let first = &flat[group[0]];
            let mut prompt = Tensor::zeros(vec![first.1.channels, first.1.height, first.1.width]);
            let mut outcomes = Vec::with_capacity(group.len());
            for &i in group {
                let (_, clip, ex_seed) = flat[i];
                let out = optimize_instance(clip, clip.label as usize, params, cfg, ex_seed, prompt.clone())?;
                prompt = out.prompt.clone();
                outcomes.push((i, out));
            }
            // Shared groups reference one identical final prompt tensor.
            let mut finalized = Vec::with_capacity(group.len());
            for (i, out) in outcomes {
                let (_, clip, _) = flat[i];
                let p = cfg.prompt_enabled().then_some(&prompt);
                finalized.push((
                    i,
                    finalize_frame(
                        &out.base_frame,
                        p,
                        &out.weights_norm,
                        clip,
                        cfg.store_float,
                        Some(LossAudit { initial: out.initial, last: out.last }),
                    ),
                ));
            }
            Ok(finalized)
        })
        .collect();

    let mut flat_out: Vec<(usize, CondensedExemplar)> = results?.into_iter().flatten().collect();
    flat_out.sort_by_key(|(i, _)| *i);
    Ok(flat_out.into_iter().map(|(i, ex)| (flat[i].0, ex)).collect())
}

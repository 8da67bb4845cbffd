//! Tiny temporal-shift CNN feature extractor with a growable classification
//! head.
//!
//! Two 3×3 conv stages (C→8, then 8→16 at stride 2) with a temporal channel
//! shift between them, spatial global-average pooling, and a temporal mean
//! produce a 16-dim clip embedding. Both stage maps are captured so later
//! stages can distill against them. A single condensed frame goes through the
//! same path by replicating it along the temporal axis first.

use crate::autodiff::{GradGraph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

pub const STAGE1_CHANNELS: usize = 8;
pub const STAGE2_CHANNELS: usize = 16;
pub const EMBED_DIM: usize = 16;
pub const DEFAULT_SHIFT_FOLD: f64 = 1.0 / 8.0;

/// Feature-extractor weights plus the growable head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub conv1_kernel: Tensor, // [8, C, 3, 3]
    pub conv1_bias: Tensor,   // [8]
    pub conv2_kernel: Tensor, // [16, 8, 3, 3]
    pub conv2_bias: Tensor,   // [16]
    pub head_weight: Tensor,  // [num_classes, 16]
    pub head_bias: Tensor,    // [num_classes]
    /// Fraction of channels shifted per temporal direction, in (0, 0.5].
    pub shift_fold: f64,
    pub num_classes: usize,
    pub in_channels: usize,
}

/// Embedding plus the two intermediate maps used for spatial distillation.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// 16-dim clip embedding (spatial pool then temporal mean).
    pub embedding: Tensor,
    /// Post-conv1 post-shift map and post-conv2 map, each `[T, C_l, H_l, W_l]`.
    pub stage_maps: [Tensor; 2],
}

/// Frozen deep copy of the previous stage's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot(ModelParams);

impl ModelSnapshot {
    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    pub fn from_params(params: ModelParams) -> Self {
        ModelSnapshot(params)
    }
}

fn gaussian(rng: &mut ChaCha12Rng, n: usize, sigma: f64) -> Vec<f64> {
    // Box-Muller keeps us independent of distribution-crate API churn.
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        out.push(r * c * sigma);
        if out.len() < n {
            out.push(r * s * sigma);
        }
    }
    out
}

/// Gaussian filters with the per-filter mean removed. A zero-DC filter
/// ignores uniform brightness and responds to edges and texture, which is
/// what separates the moving shapes; raw random filters make every pooled
/// feature a near-multiple of total intensity.
fn zero_dc_filters(rng: &mut ChaCha12Rng, filters: usize, filter_len: usize, sigma: f64) -> Vec<f64> {
    let mut data = gaussian(rng, filters * filter_len, sigma);
    for f in 0..filters {
        let win = &mut data[f * filter_len..(f + 1) * filter_len];
        let mean: f64 = win.iter().sum::<f64>() / filter_len as f64;
        for v in win.iter_mut() {
            *v -= mean;
        }
    }
    data
}

impl ModelParams {
    /// Fresh model with a head of `num_classes` outputs (0 is valid before
    /// the first stage extends it). Kaiming-style scale on conv kernels.
    pub fn init(in_channels: usize, num_classes: usize, shift_fold: f64, seed: u64) -> Result<Self> {
        if !(shift_fold > 0.0 && shift_fold <= 0.5) {
            return Err(Error::Domain(format!("shift_fold {} not in (0, 0.5]", shift_fold)));
        }
        if in_channels == 0 {
            return Err(Error::Domain("in_channels must be positive".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        // Inputs sit in [0, 1] and global pooling over mostly-background
        // frames shrinks activations hard, so the conv scales run well above
        // the usual fan-in rule to land clip embeddings near unit size.
        let s1 = 4.0 * (2.0 / (in_channels * 9) as f64).sqrt();
        let s2 = 4.0 * (2.0 / (STAGE1_CHANNELS * 9) as f64).sqrt();
        let hw = num_classes * EMBED_DIM;
        // Give each temporally shifted channel an unshifted twin with the
        // same filter: the second stage can then difference a feature
        // against its previous/next-frame response from step zero, which is
        // the motion signal the shift exists to expose.
        let mut conv1 = zero_dc_filters(&mut rng, STAGE1_CHANNELS, in_channels * 9, s1);
        let flen = in_channels * 9;
        let n_shift = shifted_channels(STAGE1_CHANNELS, shift_fold);
        for ci in 0..(2 * n_shift).min(STAGE1_CHANNELS / 2) {
            let twin = 2 * n_shift + ci;
            if twin < STAGE1_CHANNELS {
                let src: Vec<f64> = conv1[ci * flen..(ci + 1) * flen].to_vec();
                conv1[twin * flen..(twin + 1) * flen].copy_from_slice(&src);
            }
        }
        Ok(ModelParams {
            conv1_kernel: Tensor::new(vec![STAGE1_CHANNELS, in_channels, 3, 3], conv1)?,
            // small positive bias keeps the zero-DC filters out of the
            // dead half of the relu on the mostly-black background
            conv1_bias: Tensor::new(vec![STAGE1_CHANNELS], vec![0.05; STAGE1_CHANNELS])?,
            conv2_kernel: Tensor::new(
                vec![STAGE2_CHANNELS, STAGE1_CHANNELS, 3, 3],
                zero_dc_filters(&mut rng, STAGE2_CHANNELS, STAGE1_CHANNELS * 9, s2),
            )?,
            conv2_bias: Tensor::new(vec![STAGE2_CHANNELS], vec![0.05; STAGE2_CHANNELS])?,
            head_weight: Tensor::new(vec![num_classes, EMBED_DIM], gaussian(&mut rng, hw, 0.01))?,
            head_bias: Tensor::zeros(vec![num_classes]),
            shift_fold,
            num_classes,
            in_channels,
        })
    }

    /// Grow the head by `n_new` classes. Existing rows are copied
    /// bit-identically; new rows draw from a seeded Gaussian (σ = 0.01).
    pub fn extend_head(&self, n_new: usize, seed: u64) -> Result<ModelParams> {
        if n_new == 0 {
            return Err(Error::Domain("extend_head requires n_new >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let total = self.num_classes + n_new;
        let mut weight = self.head_weight.data.clone();
        weight.extend(gaussian(&mut rng, n_new * EMBED_DIM, 0.01));
        let mut bias = self.head_bias.data.clone();
        bias.extend(std::iter::repeat(0.0).take(n_new));
        let mut out = self.clone();
        out.head_weight = Tensor::new(vec![total, EMBED_DIM], weight)?;
        out.head_bias = Tensor::new(vec![total], bias)?;
        out.num_classes = total;
        Ok(out)
    }

    /// Deep frozen copy for distillation.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot(self.clone())
    }

    /// Trainable feature-extractor and head tensors, in a fixed order.
    pub fn tensors(&self) -> [&Tensor; 6] {
        [
            &self.conv1_kernel,
            &self.conv1_bias,
            &self.conv2_kernel,
            &self.conv2_bias,
            &self.head_weight,
            &self.head_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.conv1_kernel,
            &mut self.conv1_bias,
            &mut self.conv2_kernel,
            &mut self.conv2_bias,
            &mut self.head_weight,
            &mut self.head_bias,
        ]
    }
}

/// Number of channels shifted in each temporal direction.
pub fn shifted_channels(channels: usize, fold: f64) -> usize {
    (fold * channels as f64).floor() as usize
}

/// Build the index map realizing the temporal shift on a `[T, C, H, W]`
/// block: the first `n` channels move +1 in time, the next `n` move −1,
/// vacated slots are zero-filled, everything else passes through.
fn temporal_shift_map(t: usize, c: usize, h: usize, w: usize, n_shift: usize) -> Vec<Option<usize>> {
    let hw = h * w;
    let mut map = vec![None; t * c * hw];
    for ti in 0..t {
        for ci in 0..c {
            let dst = (ti * c + ci) * hw;
            let src_t = if ci < n_shift {
                // forward shift: out[t] = in[t-1]
                if ti == 0 {
                    continue;
                }
                ti - 1
            } else if ci < 2 * n_shift {
                // backward shift: out[t] = in[t+1]
                if ti + 1 == t {
                    continue;
                }
                ti + 1
            } else {
                ti
            };
            let src = (src_t * c + ci) * hw;
            for p in 0..hw {
                map[dst + p] = Some(src + p);
            }
        }
    }
    map
}

/// Differentiable temporal shift of a `[T, C, H, W]` node.
pub fn temporal_shift(g: &mut GradGraph, x: NodeId, fold: f64) -> Result<NodeId> {
    let shape = g.value(x).shape.clone();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("temporal_shift expects [T,C,H,W], got {:?}", shape)));
    }
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if t == 0 {
        return Err(Error::Dim("temporal_shift requires T >= 1".into()));
    }
    let n_shift = shifted_channels(c, fold);
    let map = temporal_shift_map(t, c, h, w, n_shift);
    g.gather(x, map, shape)
}

/// Replicate a `[C, H, W]` frame node into a `[T, C, H, W]` clip node.
pub fn replicate_frame(g: &mut GradGraph, frame: NodeId, t: usize) -> Result<NodeId> {
    let shape = g.value(frame).shape.clone();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("replicate_frame expects [C,H,W], got {:?}", shape)));
    }
    if t == 0 {
        return Err(Error::Domain("replicate_frame requires T >= 1".into()));
    }
    let n = g.value(frame).numel();
    let mut map = Vec::with_capacity(t * n);
    for _ in 0..t {
        map.extend((0..n).map(Some));
    }
    let out_shape = vec![t, shape[0], shape[1], shape[2]];
    g.gather(frame, map, out_shape)
}

/// Graph handles for the model parameters.
#[derive(Clone, Copy, Debug)]
pub struct ParamNodes {
    pub conv1_kernel: NodeId,
    pub conv1_bias: NodeId,
    pub conv2_kernel: NodeId,
    pub conv2_bias: NodeId,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
    pub shift_fold: f64,
}

/// Insert the model parameters as graph leaves. With `trainable` they
/// require gradients; otherwise they are constants (condensing, eval).
pub fn add_params(g: &mut GradGraph, params: &ModelParams, trainable: bool) -> ParamNodes {
    let mut ins = |t: &Tensor| {
        let mut t = t.clone();
        t.requires_grad = trainable;
        t.grad = None;
        g.leaf(t)
    };
    ParamNodes {
        conv1_kernel: ins(&params.conv1_kernel),
        conv1_bias: ins(&params.conv1_bias),
        conv2_kernel: ins(&params.conv2_kernel),
        conv2_bias: ins(&params.conv2_bias),
        head_weight: ins(&params.head_weight),
        head_bias: ins(&params.head_bias),
        shift_fold: params.shift_fold,
    }
}

/// Feature nodes of one clip inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureNodes {
    pub embedding: NodeId,
    pub stage1: NodeId,
    pub stage2: NodeId,
}

/// Build the extractor on a `[T, C, H, W]` clip node: conv1 → shift →
/// relu → conv2 (stride 2) → relu → spatial pool → temporal mean.
/// Stage maps are captured post-shift and post-conv2 respectively.
pub fn features_graph(g: &mut GradGraph, p: &ParamNodes, clip: NodeId) -> Result<FeatureNodes> {
    let shape = g.value(clip).shape.clone();
    if shape.len() != 4 {
        return Err(Error::Dim(format!("features_graph expects [T,C,H,W], got {:?}", shape)));
    }
    let t = shape[0];
    let c1 = g.conv2d(clip, p.conv1_kernel, Some(p.conv1_bias), 1, 1)?;
    let stage1 = temporal_shift(g, c1, p.shift_fold)?;
    let r1 = g.relu(stage1);
    let stage2 = g.conv2d(r1, p.conv2_kernel, Some(p.conv2_bias), 2, 1)?;
    let r2 = g.relu(stage2);
    let pooled = g.global_avg_pool(r2)?; // [T, 16]
    let uniform = g.constant(Tensor::new(vec![t], vec![1.0 / t as f64; t])?);
    let embedding = g.weighted_sum(uniform, pooled)?; // [16]
    Ok(FeatureNodes { embedding, stage1, stage2 })
}

/// Head logits for an embedding node.
pub fn classify_graph(g: &mut GradGraph, p: &ParamNodes, embedding: NodeId) -> Result<NodeId> {
    g.linear(embedding, p.head_weight, p.head_bias)
}

/// Clip embedding of a single `[C, H, W]` frame replicated `t` times,
/// bit-identical to running [`features_graph`] on the replicated clip.
///
/// Replication makes every temporal slice equal, so after the shift at most
/// three distinct maps exist: the first frame (forward-shifted channels
/// vacated), the last frame (backward-shifted channels vacated) and the
/// interior (all neighbors equal, shift a no-op). Only those run through the
/// second stage; the temporal mean then accumulates in original frame order
/// so the arithmetic matches the generic path rounding for rounding.
pub fn replicated_features_graph(
    g: &mut GradGraph,
    p: &ParamNodes,
    frame: NodeId,
    t: usize,
) -> Result<NodeId> {
    let shape = g.value(frame).shape.clone();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("expected a [C,H,W] frame, got {:?}", shape)));
    }
    if t == 0 {
        return Err(Error::Domain("replication count must be >= 1".into()));
    }
    let numel = g.value(frame).numel();
    let single = g.gather(frame, (0..numel).map(Some).collect(), vec![1, shape[0], shape[1], shape[2]])?;
    let c1 = g.conv2d(single, p.conv1_kernel, Some(p.conv1_bias), 1, 1)?;
    let c1_shape = g.value(c1).shape.clone();
    let (c, h, w) = (c1_shape[1], c1_shape[2], c1_shape[3]);
    let n_shift = shifted_channels(c, p.shift_fold);

    // Zero the given channel blocks of the [1, C, H, W] map.
    let zero_channels = |g: &mut GradGraph, blocks: &[std::ops::Range<usize>]| -> Result<NodeId> {
        if n_shift == 0 || blocks.is_empty() {
            return Ok(c1);
        }
        let hw = h * w;
        let mut map: Vec<Option<usize>> = (0..c * hw).map(Some).collect();
        for block in blocks {
            for ci in block.clone() {
                for p in 0..hw {
                    map[ci * hw + p] = None;
                }
            }
        }
        g.gather(c1, map, c1_shape.clone())
    };

    let fwd = 0..n_shift;
    let bwd = n_shift..2 * n_shift;
    // distinct temporal roles: (first, mid, last) collapse when t is small
    let first = if t == 1 {
        zero_channels(g, &[fwd.clone(), bwd.clone()])?
    } else {
        zero_channels(g, &[fwd])?
    };
    let mid = if t > 2 { zero_channels(g, &[])? } else { first };
    let last = if t == 1 { first } else { zero_channels(g, &[bwd])? };

    let mut pooled_of = std::collections::HashMap::new();
    let mut pooled = |g: &mut GradGraph, map: NodeId| -> Result<NodeId> {
        if let Some(&n) = pooled_of.get(&map.index()) {
            return Ok(n);
        }
        let r1 = g.relu(map);
        let c2 = g.conv2d(r1, p.conv2_kernel, Some(p.conv2_bias), 2, 1)?;
        let r2 = g.relu(c2);
        let gap = g.global_avg_pool(r2)?; // [1, 16]
        let flat = g.gather(gap, (0..STAGE2_CHANNELS).map(Some).collect(), vec![STAGE2_CHANNELS])?;
        pooled_of.insert(map.index(), flat);
        Ok(flat)
    };

    let mut scaled_of = std::collections::HashMap::new();
    let inv_t = 1.0 / t as f64;
    let mut acc: Option<NodeId> = None;
    for ti in 0..t {
        let role = if ti == 0 {
            first
        } else if ti + 1 == t {
            last
        } else {
            mid
        };
        let f = pooled(g, role)?;
        let term = match scaled_of.get(&f.index()) {
            Some(&n) => n,
            None => {
                let n = g.scale(f, inv_t);
                scaled_of.insert(f.index(), n);
                n
            }
        };
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("t >= 1"))
}

/// Run the extractor outside any training loop and materialize the bundle.
/// The clip tensor must already be normalized to [0, 1].
pub fn extract_features(params: &ModelParams, clip: &Tensor) -> Result<FeatureBundle> {
    let mut g = GradGraph::new();
    let input = g.constant(clip.clone());
    let p = add_params(&mut g, params, false);
    let f = features_graph(&mut g, &p, input)?;
    Ok(FeatureBundle {
        embedding: g.value(f.embedding).clone(),
        stage_maps: [g.value(f.stage1).clone(), g.value(f.stage2).clone()],
    })
}

/// Head logits for a bundle produced by [`extract_features`].
pub fn classify(params: &ModelParams, bundle: &FeatureBundle) -> Result<Tensor> {
    if params.num_classes == 0 {
        return Err(Error::Contract("classify requires a head of width >= 1".into()));
    }
    let mut g = GradGraph::new();
    let emb = g.constant(bundle.embedding.clone());
    let p = add_params(&mut g, params, false);
    let logits = classify_graph(&mut g, &p, emb)?;
    Ok(g.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn rand_clip(t: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = t * c * h * w;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::new(vec![t, c, h, w], data).unwrap()
    }

    /// Independent plain-loop re-implementation of the forward path, used as
    /// the oracle for the graph-built extractor.
    fn plain_forward(params: &ModelParams, clip: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (t, c, h, w) = (clip.shape[0], clip.shape[1], clip.shape[2], clip.shape[3]);
        let conv = |x: &[f64], n: usize, cin: usize, hh: usize, ww: usize, k: &[f64], b: &[f64], cout: usize, stride: usize| {
            let oh = (hh + 2 - 3) / stride + 1;
            let ow = (ww + 2 - 3) / stride + 1;
            let mut out = vec![0.0; n * cout * oh * ow];
            for ni in 0..n {
                for oc in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[oc];
                            for ic in 0..cin {
                                for ky in 0..3usize {
                                    for kx in 0..3usize {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if iy < 0 || ix < 0 || iy >= hh as isize || ix >= ww as isize {
                                            continue;
                                        }
                                        acc += x[((ni * cin + ic) * hh + iy as usize) * ww + ix as usize]
                                            * k[((oc * cin + ic) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                            out[((ni * cout + oc) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
            (out, oh, ow)
        };
        let (c1, oh1, ow1) = conv(
            &clip.data, t, c, h, w,
            &params.conv1_kernel.data, &params.conv1_bias.data, STAGE1_CHANNELS, 1,
        );
        // shift
        let n_shift = shifted_channels(STAGE1_CHANNELS, params.shift_fold);
        let hw = oh1 * ow1;
        let mut shifted = vec![0.0; c1.len()];
        for ti in 0..t {
            for ci in 0..STAGE1_CHANNELS {
                for p in 0..hw {
                    let dst = (ti * STAGE1_CHANNELS + ci) * hw + p;
                    if ci < n_shift {
                        if ti > 0 {
                            shifted[dst] = c1[((ti - 1) * STAGE1_CHANNELS + ci) * hw + p];
                        }
                    } else if ci < 2 * n_shift {
                        if ti + 1 < t {
                            shifted[dst] = c1[((ti + 1) * STAGE1_CHANNELS + ci) * hw + p];
                        }
                    } else {
                        shifted[dst] = c1[dst];
                    }
                }
            }
        }
        let relu1: Vec<f64> = shifted.iter().map(|&v| v.max(0.0)).collect();
        let (c2, oh2, ow2) = conv(
            &relu1, t, STAGE1_CHANNELS, oh1, ow1,
            &params.conv2_kernel.data, &params.conv2_bias.data, STAGE2_CHANNELS, 2,
        );
        let relu2: Vec<f64> = c2.iter().map(|&v| v.max(0.0)).collect();
        let area = (oh2 * ow2) as f64;
        let mut emb = vec![0.0; STAGE2_CHANNELS];
        for ti in 0..t {
            for ci in 0..STAGE2_CHANNELS {
                let base = (ti * STAGE2_CHANNELS + ci) * oh2 * ow2;
                let s: f64 = relu2[base..base + oh2 * ow2].iter().sum();
                emb[ci] += s / area / t as f64;
            }
        }
        let mut logits = vec![0.0; params.num_classes];
        for r in 0..params.num_classes {
            let mut acc = params.head_bias.data[r];
            for j in 0..EMBED_DIM {
                acc += params.head_weight.data[r * EMBED_DIM + j] * emb[j];
            }
            logits[r] = acc;
        }
        (emb, logits)
    }

    #[test]
    fn shift_single_frame_zeroes_shifted_channels() {
        let mut g = GradGraph::new();
        let x = g.leaf(Tensor::new(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = temporal_shift(&mut g, x, 0.25).unwrap();
        // 1 channel each direction; T = 1 forces zero fill on both.
        assert_eq!(g.value(y).data, vec![0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn shift_with_zero_channels_is_identity() {
        let mut g = GradGraph::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let x = g.leaf(Tensor::new(vec![2, 2, 2, 2], data.clone()).unwrap());
        // fold small enough that floor(fold * 2) = 0
        let y = temporal_shift(&mut g, x, 0.2).unwrap();
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn shift_matches_index_oracle() {
        // T=3, C=8, fold=1/8: exactly channel 0 forward, channel 1 backward.
        let (t, c, h, w) = (3usize, 8usize, 2usize, 2usize);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..t * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = GradGraph::new();
        let x = g.leaf(Tensor::new(vec![t, c, h, w], data.clone()).unwrap());
        let y = temporal_shift(&mut g, x, 1.0 / 8.0).unwrap();
        let out = &g.value(y).data;
        let hw = h * w;
        for ti in 0..t {
            for ci in 0..c {
                for p in 0..hw {
                    let got = out[(ti * c + ci) * hw + p];
                    let want = match ci {
                        0 => {
                            if ti == 0 { 0.0 } else { data[((ti - 1) * c) * hw + p] }
                        }
                        1 => {
                            if ti + 1 == t { 0.0 } else { data[((ti + 1) * c + 1) * hw + p] }
                        }
                        _ => data[(ti * c + ci) * hw + p],
                    };
                    assert_eq!(got, want, "t={} c={} p={}", ti, ci, p);
                }
            }
        }
    }

    #[test]
    fn shift_preserves_mass_up_to_boundaries() {
        // Nonnegative input: zero-padding can only drop mass.
        let clip = rand_clip(4, 8, 3, 3, 17);
        let input_sum: f64 = clip.data.iter().sum();
        let mut g = GradGraph::new();
        let x = g.leaf(clip);
        let y = temporal_shift(&mut g, x, 0.25).unwrap();
        let out_sum: f64 = g.value(y).data.iter().sum();
        assert!(out_sum <= input_sum + 1e-12);
    }

    #[test]
    fn zero_clip_zero_bias_gives_zero_embedding() {
        let mut params = ModelParams::init(3, 4, DEFAULT_SHIFT_FOLD, 3).unwrap();
        params.conv1_bias = Tensor::zeros(vec![STAGE1_CHANNELS]);
        params.conv2_bias = Tensor::zeros(vec![STAGE2_CHANNELS]);
        let clip = Tensor::zeros(vec![2, 3, 8, 8]);
        let bundle = extract_features(&params, &clip).unwrap();
        assert!(bundle.embedding.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_frames_without_shift_collapse_to_single_frame_features() {
        // fold chosen so floor(fold * 8) = 0: shifting disabled.
        let mut params = ModelParams::init(3, 2, DEFAULT_SHIFT_FOLD, 4).unwrap();
        params.shift_fold = 0.1;
        let frame = rand_clip(1, 3, 6, 6, 8);
        let mut stacked = frame.data.clone();
        for _ in 1..4 {
            stacked.extend_from_slice(&frame.data);
        }
        let clip = Tensor::new(vec![4, 3, 6, 6], stacked).unwrap();
        let single = extract_features(&params, &frame).unwrap();
        let multi = extract_features(&params, &clip).unwrap();
        assert_eq!(single.embedding.data, multi.embedding.data);
    }

    #[test]
    fn extractor_matches_clean_room_forward() {
        let params = ModelParams::init(3, 5, DEFAULT_SHIFT_FOLD, 21).unwrap();
        let clip = rand_clip(4, 3, 8, 8, 22);
        let bundle = extract_features(&params, &clip).unwrap();
        let logits = classify(&params, &bundle).unwrap();
        let (emb_oracle, logits_oracle) = plain_forward(&params, &clip);
        for (a, b) in bundle.embedding.data.iter().zip(&emb_oracle) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
        for (a, b) in logits.data.iter().zip(&logits_oracle) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn zero_embedding_zero_weight_logits_equal_bias() {
        let mut params = ModelParams::init(3, 3, DEFAULT_SHIFT_FOLD, 2).unwrap();
        params.head_weight = Tensor::zeros(vec![3, EMBED_DIM]);
        params.head_bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let bundle = FeatureBundle {
            embedding: Tensor::zeros(vec![EMBED_DIM]),
            stage_maps: [Tensor::zeros(vec![1, 1, 1, 1]), Tensor::zeros(vec![1, 1, 1, 1])],
        };
        let logits = classify(&params, &bundle).unwrap();
        assert_eq!(logits.data, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn one_hot_weights_classify_constructed_class() {
        let mut params = ModelParams::init(3, 4, DEFAULT_SHIFT_FOLD, 2).unwrap();
        let mut w = vec![0.0; 4 * EMBED_DIM];
        w[2 * EMBED_DIM + 7] = 10.0; // class 2 keys on embedding dim 7
        params.head_weight = Tensor::new(vec![4, EMBED_DIM], w).unwrap();
        params.head_bias = Tensor::zeros(vec![4]);
        let mut emb = vec![0.0; EMBED_DIM];
        emb[7] = 1.0;
        let bundle = FeatureBundle {
            embedding: Tensor::new(vec![EMBED_DIM], emb).unwrap(),
            stage_maps: [Tensor::zeros(vec![1, 1, 1, 1]), Tensor::zeros(vec![1, 1, 1, 1])],
        };
        let logits = classify(&params, &bundle).unwrap();
        let argmax = logits
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn extend_head_preserves_old_rows_and_reproduces_new() {
        let params = ModelParams::init(3, 5, DEFAULT_SHIFT_FOLD, 9).unwrap();
        assert!(params.extend_head(0, 1).is_err());
        let grown = params.extend_head(2, 42).unwrap();
        assert_eq!(grown.num_classes, 7);
        assert_eq!(
            &grown.head_weight.data[..5 * EMBED_DIM],
            &params.head_weight.data[..]
        );
        assert_eq!(&grown.head_bias.data[..5], &params.head_bias.data[..]);
        // reproducible under the same seed
        let again = params.extend_head(2, 42).unwrap();
        assert_eq!(grown.head_weight.data, again.head_weight.data);
        // old-class logits unchanged on any input
        let clip = rand_clip(2, 3, 8, 8, 10);
        let b0 = extract_features(&params, &clip).unwrap();
        let l0 = classify(&params, &b0).unwrap();
        let b1 = extract_features(&grown, &clip).unwrap();
        let l1 = classify(&grown, &b1).unwrap();
        assert_eq!(&l1.data[..5], &l0.data[..]);
    }

    #[test]
    fn snapshot_is_isolated_from_later_mutation() {
        let mut params = ModelParams::init(3, 2, DEFAULT_SHIFT_FOLD, 6).unwrap();
        let clip = rand_clip(2, 3, 8, 8, 11);
        let before = extract_features(&params, &clip).unwrap();
        let snap = params.snapshot();
        params.conv1_kernel.data.iter_mut().for_each(|v| *v += 1.0);
        assert_ne!(snap.params().conv1_kernel.data, params.conv1_kernel.data);
        let from_snap = extract_features(snap.params(), &clip).unwrap();
        assert_eq!(before.embedding.data, from_snap.embedding.data);
    }

    #[test]
    fn replicated_fast_path_is_bit_identical_to_generic() {
        for (t, fold) in [(1usize, 0.25), (2, 0.25), (4, 0.25), (8, DEFAULT_SHIFT_FOLD), (4, 0.1)] {
            let params = ModelParams::init(3, 4, fold, 50 + t as u64).unwrap();
            let frame = rand_clip(1, 3, 8, 8, 60 + t as u64);
            let frame3 = Tensor::new(vec![3, 8, 8], frame.data.clone()).unwrap();

            // generic: replicate then run the full extractor
            let mut stacked = Vec::new();
            for _ in 0..t {
                stacked.extend_from_slice(&frame.data);
            }
            let clip = Tensor::new(vec![t, 3, 8, 8], stacked).unwrap();
            let generic = extract_features(&params, &clip).unwrap();

            let mut g = GradGraph::new();
            let pn = add_params(&mut g, &params, false);
            let fnode = g.constant(frame3);
            let emb = replicated_features_graph(&mut g, &pn, fnode, t).unwrap();
            let fast = &g.value(emb).data;
            assert_eq!(fast.len(), generic.embedding.data.len());
            for (a, b) in fast.iter().zip(&generic.embedding.data) {
                assert_eq!(a.to_bits(), b.to_bits(), "t={} fold={}", t, fold);
            }
        }
    }

    #[test]
    fn model_gradients_pass_fd_checks() {
        // w.r.t. input pixels, conv kernel (θ) and head weight (ξ).
        let params = ModelParams::init(2, 3, 0.25, 30).unwrap();
        let clip = rand_clip(3, 2, 6, 6, 31);

        let p1 = params.clone();
        let rep = finite_difference_check(
            |g, leaf| {
                let pn = add_params(g, &p1, false);
                let f = features_graph(g, &pn, leaf)?;
                let logits = classify_graph(g, &pn, f.embedding)?;
                g.cross_entropy(logits, 1)
            },
            &clip,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "pixels: {}", rep.max_rel_err);

        let p2 = params.clone();
        let clip2 = clip.clone();
        let rep = finite_difference_check(
            |g, leaf| {
                let mut pn = add_params(g, &p2, false);
                pn.conv1_kernel = leaf;
                let input = g.constant(clip2.clone());
                let f = features_graph(g, &pn, input)?;
                let logits = classify_graph(g, &pn, f.embedding)?;
                g.cross_entropy(logits, 0)
            },
            &params.conv1_kernel,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "conv1 kernel: {}", rep.max_rel_err);

        let p3 = params.clone();
        let clip3 = clip.clone();
        let rep = finite_difference_check(
            |g, leaf| {
                let mut pn = add_params(g, &p3, false);
                pn.head_weight = leaf;
                let input = g.constant(clip3.clone());
                let f = features_graph(g, &pn, input)?;
                let logits = classify_graph(g, &pn, f.embedding)?;
                g.cross_entropy(logits, 2)
            },
            &params.head_weight,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.pass, "head weight: {}", rep.max_rel_err);
    }
}

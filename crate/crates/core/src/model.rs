//! Backbone-agnostic multi-scale segmentation network.
//!
//! A model is a stack of convolutional blocks, each ending in one 2x2 max
//! pool. Every block feeds a 1x1 head whose logit map is squashed with a
//! sigmoid and resampled (corner-aligned bilinear) to the input resolution.
//! The per-block maps are fused with softmax-normalized weights.

use crate::error::{Error, Result};
use crate::layers::{
    bilinear_resize, bilinear_resize_backward, conv3x3_backward, conv3x3_forward,
    maxpool2x2_backward, maxpool2x2_forward, project1x1_backward, project1x1_forward,
    relu_backward_inplace, relu_inplace, sigmoid,
};
use crate::scalar::Scalar;
use crate::tensor::{ProbMap, Tensor3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const INPUT_CHANNELS: usize = 3;
pub const FUSION_PARAM: &str = "fusion.logits";

/// Describes the feature extractor. Each inner list of the channel plan is
/// one block: the output widths of its 3x3 convolutions, followed by a pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub name: String,
    pub block_channel_plan: Vec<Vec<usize>>,
    pub input_size: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::vgg16_first3(256)
    }
}

impl BackboneSpec {
    pub const VGG16_FIRST3: &'static str = "vgg16-first3";
    pub const CUSTOM: &'static str = "custom";

    pub fn vgg16_first3_plan() -> Vec<Vec<usize>> {
        vec![vec![64, 64], vec![128, 128], vec![256, 256, 256]]
    }

    pub fn vgg16_first3(input_size: usize) -> Self {
        Self {
            name: Self::VGG16_FIRST3.to_string(),
            block_channel_plan: Self::vgg16_first3_plan(),
            input_size,
        }
    }

    pub fn custom(block_channel_plan: Vec<Vec<usize>>, input_size: usize) -> Self {
        Self {
            name: Self::CUSTOM.to_string(),
            block_channel_plan,
            input_size,
        }
    }

    /// Channel plan after resolving the named preset; validates the spec.
    pub fn resolved_plan(&self) -> Result<Vec<Vec<usize>>> {
        let plan = match self.name.as_str() {
            Self::VGG16_FIRST3 => {
                let default = Self::vgg16_first3_plan();
                if !self.block_channel_plan.is_empty() && self.block_channel_plan != default {
                    return Err(Error::Config(format!(
                        "backbone `{}` has a fixed channel plan; use `{}` for {:?}",
                        self.name,
                        Self::CUSTOM,
                        self.block_channel_plan
                    )));
                }
                default
            }
            Self::CUSTOM => self.block_channel_plan.clone(),
            other => {
                return Err(Error::Config(format!("unknown backbone `{other}`")));
            }
        };
        if plan.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 blocks, got {}",
                plan.len()
            )));
        }
        if plan.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(Error::Config(
                "every block needs at least one convolution of non-zero width".into(),
            ));
        }
        let stride = 1usize << plan.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {stride} for {} blocks",
                self.input_size,
                plan.len()
            )));
        }
        Ok(plan)
    }

    pub fn block_count(&self) -> Result<usize> {
        Ok(self.resolved_plan()?.len())
    }

    /// Head upsampling factor of every block: 2, 4, 8, ...
    pub fn upsample_factors(&self) -> Result<Vec<usize>> {
        Ok((1..=self.block_count()?).map(|b| 1usize << b).collect())
    }
}

/// Learnable fusion logits; the effective weights are their softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights<T> {
    pub logits: Vec<T>,
}

impl<T: Scalar> FusionWeights<T> {
    pub fn uniform(blocks: usize) -> Self {
        Self {
            logits: vec![T::zero(); blocks],
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Softmax of the logits: strictly positive and summing to one.
    pub fn weights(&self) -> Vec<T> {
        softmax(&self.logits)
    }
}

pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| a.max(b));
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Per-block probability maps and their fusion, all at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput<T> {
    pub per_block: Vec<ProbMap<T>>,
    pub fused: ProbMap<T>,
}

/// Elementwise convex combination of the per-block maps under
/// `softmax(logits)`.
pub fn fuse_maps<T: Scalar>(per_block: &[ProbMap<T>], weights: &FusionWeights<T>) -> Result<ProbMap<T>> {
    if per_block.len() != weights.len() {
        return Err(Error::Config(format!(
            "fusion has {} weights but {} maps were given",
            weights.len(),
            per_block.len()
        )));
    }
    let first = per_block
        .first()
        .ok_or_else(|| Error::Config("cannot fuse an empty list of maps".into()))?;
    for m in per_block {
        crate::tensor::check_same_shape("fuse_maps", first, m)?;
    }
    let w = weights.weights();
    let mut values = vec![T::zero(); first.len()];
    for (m, &wi) in per_block.iter().zip(&w) {
        for (acc, &v) in values.iter_mut().zip(&m.values) {
            *acc += wi * v;
        }
    }
    // rounding in the weights must not push the result outside the hull
    for (p, acc) in values.iter_mut().enumerate() {
        let (lo, hi) = per_block.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), m| {
            (lo.min(m.values[p]), hi.max(m.values[p]))
        });
        *acc = acc.max(lo).min(hi);
    }
    Ok(ProbMap {
        height: first.height,
        width: first.width,
        values,
    })
}

/// Named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat, ordered set of every trainable value of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// SHA-256 over names, shapes and the bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Name of the first parameter whose name or shape differs.
    pub fn first_mismatch(&self, other: &Self) -> Option<String> {
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Some(a.name.clone());
            }
        }
        match self.params.len().cmp(&other.params.len()) {
            std::cmp::Ordering::Greater => Some(self.params[other.params.len()].name.clone()),
            std::cmp::Ordering::Less => Some(other.params[self.params.len()].name.clone()),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn zeros_like(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    weight: usize,
    bias: usize,
    in_channels: usize,
    out_channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct HeadSlot {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    blocks: Vec<Vec<ConvSlot>>,
    heads: Vec<HeadSlot>,
    fusion: usize,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    /// Backbone convolutions and heads; fusion logits fixed.
    BackboneAndHeads,
    /// Fusion logits only; backbone and heads frozen.
    FusionOnly,
    All,
}

impl Trainable {
    fn backbone(self) -> bool {
        matches!(self, Trainable::BackboneAndHeads | Trainable::All)
    }

    fn fusion(self) -> bool {
        matches!(self, Trainable::FusionOnly | Trainable::All)
    }

    /// Per-parameter mask aligned with a model's [`ParamStore`].
    pub fn mask<T: Scalar>(self, model: &SegModel<T>) -> Vec<bool> {
        model
            .params
            .iter()
            .map(|p| {
                if p.name == FUSION_PARAM {
                    self.fusion()
                } else {
                    self.backbone()
                }
            })
            .collect()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    cols: Vec<Vec<Vec<T>>>,
    activations: Vec<Vec<Tensor3<T>>>,
    pool_args: Vec<Vec<u32>>,
    features: Vec<Tensor3<T>>,
    head_probs: Vec<Vec<T>>,
}

/// Loss gradient with respect to every map of a [`MultiScaleOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad<T> {
    pub per_block: Vec<Vec<T>>,
    pub fused: Vec<T>,
}

impl<T: Scalar> OutputGrad<T> {
    pub fn zeros(blocks: usize, pixels: usize) -> Self {
        Self {
            per_block: vec![vec![T::zero(); pixels]; blocks],
            fused: vec![T::zero(); pixels],
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.per_block.iter_mut().chain(std::iter::once(&mut self.fused)) {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Anything that turns an RGB image into a fused probability map.
pub trait Segmenter<T: Scalar> {
    fn segment(&self, image: &Tensor3<T>) -> Result<ProbMap<T>>;
}

/// Segmentation network: blocks, per-block heads and fusion weights.
#[derive(Debug, Clone)]
pub struct SegModel<T> {
    spec: BackboneSpec,
    plan: Vec<Vec<usize>>,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> SegModel<T> {
    /// Builds and deterministically initializes a model: He-normal conv
    /// weights, zero biases, fusion logits at zero.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        let plan = spec.resolved_plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut blocks = Vec::new();
        let mut heads = Vec::new();
        let mut in_c = INPUT_CHANNELS;
        let mut block_widths = Vec::new();
        for (b, convs) in plan.iter().enumerate() {
            let mut slots = Vec::new();
            for (j, &out_c) in convs.iter().enumerate() {
                let fan_in = in_c * 9;
                let std = (2.0 / fan_in as f64).sqrt();
                let weight = normal_vec(&mut rng, out_c * fan_in, std);
                slots.push(ConvSlot {
                    weight: params.len(),
                    bias: params.len() + 1,
                    in_channels: in_c,
                    out_channels: out_c,
                });
                params.push(Param {
                    name: format!("block{}.conv{}.weight", b + 1, j + 1),
                    shape: vec![out_c, in_c, 3, 3],
                    data: weight,
                });
                params.push(Param {
                    name: format!("block{}.conv{}.bias", b + 1, j + 1),
                    shape: vec![out_c],
                    data: vec![T::zero(); out_c],
                });
                in_c = out_c;
            }
            block_widths.push(in_c);
            blocks.push(slots);
        }
        for (b, &c) in block_widths.iter().enumerate() {
            let std = (1.0 / c as f64).sqrt();
            heads.push(HeadSlot {
                weight: params.len(),
                bias: params.len() + 1,
            });
            params.push(Param {
                name: format!("head{}.weight", b + 1),
                shape: vec![1, c, 1, 1],
                data: normal_vec(&mut rng, c, std),
            });
            params.push(Param {
                name: format!("head{}.bias", b + 1),
                shape: vec![1],
                data: vec![T::zero()],
            });
        }
        let fusion = params.len();
        params.push(Param {
            name: FUSION_PARAM.to_string(),
            shape: vec![plan.len()],
            data: vec![T::zero(); plan.len()],
        });
        Ok(Self {
            spec: spec.clone(),
            plan,
            params: ParamStore { params },
            layout: Layout {
                blocks,
                heads,
                fusion,
            },
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn block_count(&self) -> usize {
        self.plan.len()
    }

    pub fn head_count(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_size
    }

    pub fn upsample_factors(&self) -> Vec<usize> {
        (1..=self.block_count()).map(|b| 1usize << b).collect()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable access to raw parameter values, in [`ParamStore`] order.
    pub fn param_values_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.params.params.iter_mut().map(|p| &mut p.data)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Checksum of everything except the fusion logits.
    pub fn backbone_checksum(&self) -> String {
        ParamStore {
            params: self
                .params
                .params
                .iter()
                .filter(|p| p.name != FUSION_PARAM)
                .cloned()
                .collect(),
        }
        .checksum()
    }

    pub fn fusion(&self) -> FusionWeights<T> {
        FusionWeights {
            logits: self.params.params[self.layout.fusion].data.clone(),
        }
    }

    pub fn set_fusion(&mut self, weights: &FusionWeights<T>) -> Result<()> {
        if weights.len() != self.block_count() {
            return Err(Error::Config(format!(
                "fusion weights of length {} for a {}-block model",
                weights.len(),
                self.block_count()
            )));
        }
        self.params.params[self.layout.fusion].data = weights.logits.clone();
        Ok(())
    }

    /// Sets every head weight and bias to the given constant.
    pub fn fill_heads(&mut self, value: T) {
        for h in &self.layout.heads {
            self.params.params[h.weight].data.fill(value);
            self.params.params[h.bias].data.fill(value);
        }
    }

    /// Copies every named tensor of `source` with a matching name and shape
    /// into this model; returns the number of tensors loaded.
    pub fn load_pretrained(&mut self, source: &ParamStore<T>) -> usize {
        let mut loaded = 0;
        for p in self.params.params.iter_mut() {
            if let Some(src) = source.get(&p.name) {
                if src.shape == p.shape {
                    p.data.clone_from(&src.data);
                    loaded += 1;
                }
            }
        }
        loaded
    }

    /// Replaces the whole parameter store; names and shapes must match.
    pub fn set_params(&mut self, store: ParamStore<T>) -> Result<()> {
        if let Some(name) = self.params.first_mismatch(&store) {
            return Err(Error::Incompatible(name));
        }
        self.params = store;
        Ok(())
    }

    fn check_input(&self, image: &Tensor3<T>) -> Result<()> {
        let s = self.spec.input_size;
        if image.channels != INPUT_CHANNELS || image.height != s || image.width != s {
            return Err(Error::shape(
                "forward_multiscale",
                format!("{INPUT_CHANNELS}x{s}x{s}"),
                format!("{}x{}x{}", image.channels, image.height, image.width),
            ));
        }
        Ok(())
    }

    /// Inference forward pass for one image.
    pub fn forward(&self, image: &Tensor3<T>) -> Result<MultiScaleOutput<T>> {
        self.forward_train(image).map(|(out, _)| out)
    }

    /// Forward pass that also returns the cache needed by [`Self::backward`].
    pub fn forward_train(&self, image: &Tensor3<T>) -> Result<(MultiScaleOutput<T>, ForwardCache<T>)> {
        self.check_input(image)?;
        let (h, w) = (image.height, image.width);
        let p = &self.params.params;
        let mut cache = ForwardCache {
            cols: Vec::with_capacity(self.block_count()),
            activations: Vec::with_capacity(self.block_count()),
            pool_args: Vec::with_capacity(self.block_count()),
            features: Vec::with_capacity(self.block_count()),
            head_probs: Vec::with_capacity(self.block_count()),
        };
        let mut per_block = Vec::with_capacity(self.block_count());
        let mut x = image.clone();
        for (slots, head) in self.layout.blocks.iter().zip(&self.layout.heads) {
            let mut cols = Vec::with_capacity(slots.len());
            let mut acts = Vec::with_capacity(slots.len());
            for s in slots {
                let mut col = Vec::new();
                let mut y = conv3x3_forward(&x, &p[s.weight].data, &p[s.bias].data, s.out_channels, &mut col);
                relu_inplace(&mut y);
                cols.push(col);
                acts.push(y.clone());
                x = y;
            }
            let (pooled, args) = maxpool2x2_forward(&x);
            let logits = project1x1_forward(&pooled, &p[head.weight].data, p[head.bias].data[0]);
            let probs: Vec<T> = logits.into_iter().map(sigmoid).collect();
            let up = bilinear_resize(&probs, pooled.height, pooled.width, h, w);
            per_block.push(ProbMap {
                height: h,
                width: w,
                values: up,
            });
            cache.cols.push(cols);
            cache.activations.push(acts);
            cache.pool_args.push(args);
            cache.head_probs.push(probs);
            cache.features.push(pooled.clone());
            x = pooled;
        }
        let fused = fuse_maps(&per_block, &self.fusion())?;
        Ok((MultiScaleOutput { per_block, fused }, cache))
    }

    /// Backpropagates `grad` (dLoss/dmaps) and accumulates parameter
    /// gradients into `param_grads` (aligned with the [`ParamStore`]).
    pub fn backward(
        &self,
        output: &MultiScaleOutput<T>,
        cache: &ForwardCache<T>,
        grad: &OutputGrad<T>,
        trainable: Trainable,
        param_grads: &mut [Vec<T>],
    ) -> Result<()> {
        let nb = self.block_count();
        if grad.per_block.len() != nb || param_grads.len() != self.params.len() {
            return Err(Error::shape(
                "SegModel::backward",
                format!("{nb} block grads, {} param slots", self.params.len()),
                format!("{} block grads, {} param slots", grad.per_block.len(), param_grads.len()),
            ));
        }
        let (h, w) = (output.fused.height, output.fused.width);
        let weights = self.fusion().weights();

        if trainable.fusion() {
            let dz = fusion_logit_grad(&output.per_block, &weights, &grad.fused);
            for (acc, g) in param_grads[self.layout.fusion].iter_mut().zip(dz) {
                *acc += g;
            }
        }
        if !trainable.backbone() {
            return Ok(());
        }

        let p = &self.params.params;
        let mut carried: Option<Tensor3<T>> = None;
        for b in (0..nb).rev() {
            let feat = &cache.features[b];
            let head = self.layout.heads[b];
            let total: Vec<T> = grad.per_block[b]
                .iter()
                .zip(&grad.fused)
                .map(|(&g, &gf)| g + weights[b] * gf)
                .collect();
            let dprob = bilinear_resize_backward(&total, feat.height, feat.width, h, w);
            let dlogit: Vec<T> = dprob
                .iter()
                .zip(&cache.head_probs[b])
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect();
            let mut dfeat = carried
                .take()
                .unwrap_or_else(|| Tensor3::zeros(feat.channels, feat.height, feat.width));
            {
                let (dw, db) = two_mut(param_grads, head.weight, head.bias);
                project1x1_backward(&dlogit, feat, &p[head.weight].data, dw, &mut db[0], Some(&mut dfeat));
            }
            let last = cache.activations[b].last().expect("block has convolutions");
            let mut g = maxpool2x2_backward(&dfeat, &cache.pool_args[b], last.height, last.width);
            for (j, slot) in self.layout.blocks[b].iter().enumerate().rev() {
                relu_backward_inplace(&mut g, &cache.activations[b][j]);
                let need_input = !(b == 0 && j == 0);
                let (dw, db) = two_mut(param_grads, slot.weight, slot.bias);
                let next = conv3x3_backward(
                    &g,
                    &cache.cols[b][j],
                    &p[slot.weight].data,
                    slot.in_channels,
                    dw,
                    db,
                    need_input,
                );
                match next {
                    Some(t) => g = t,
                    None => break,
                }
            }
            if b > 0 {
                carried = Some(g);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Segmenter<T> for SegModel<T> {
    fn segment(&self, image: &Tensor3<T>) -> Result<ProbMap<T>> {
        Ok(self.forward(image)?.fused)
    }
}

/// Gradient of a loss with respect to the fusion logits, given the block
/// maps, their softmax weights and the loss gradient on the fused map.
pub fn fusion_logit_grad<T: Scalar>(per_block: &[ProbMap<T>], weights: &[T], dfused: &[T]) -> Vec<T> {
    // a_i = <dfused, m_i>;  dz_j = s_j (a_j - sum_i s_i a_i)
    let a: Vec<T> = per_block
        .iter()
        .map(|m| m.values.iter().zip(dfused).map(|(&v, &g)| v * g).sum())
        .collect();
    let mean: T = a.iter().zip(weights).map(|(&ai, &si)| ai * si).sum();
    a.iter().zip(weights).map(|(&aj, &sj)| sj * (aj - mean)).collect()
}

/// Runs the network on every image of a batch.
pub fn forward_multiscale<'a, T: Scalar>(
    model: &SegModel<T>,
    batch: impl IntoIterator<Item = &'a Tensor3<T>>,
) -> Result<Vec<MultiScaleOutput<T>>> {
    batch.into_iter().map(|img| model.forward(img)).collect()
}

/// Exchanges the complete parameter stores (fusion logits included).
pub fn swap_parameters<T: Scalar>(a: &mut SegModel<T>, b: &mut SegModel<T>) -> Result<()> {
    if a.spec != b.spec {
        let name = a
            .params
            .first_mismatch(&b.params)
            .unwrap_or_else(|| "backbone spec".to_string());
        return Err(Error::Incompatible(name));
    }
    if let Some(name) = a.params.first_mismatch(&b.params) {
        return Err(Error::Incompatible(name));
    }
    std::mem::swap(&mut a.params, &mut b.params);
    Ok(())
}

fn two_mut<T>(v: &mut [Vec<T>], i: usize, j: usize) -> (&mut [T], &mut [T]) {
    assert!(i < j);
    let (lo, hi) = v.split_at_mut(j);
    (&mut lo[i], &mut hi[0])
}

fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| T::lit(dist.sample(rng))).collect()
}

//! Multi-head sparse ensembles built by splitting a block-sequential network.
//!
//! Blocks `1..=split` (plus the stem) form a shared backbone evaluated once
//! per batch; the remaining blocks plus the classifier are replicated into
//! `M` heads with their own weights and masks. Training minimizes the mean
//! of the per-head cross-entropies, and inference soft-votes the heads.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_forward, softmax_rows, GradientSet, Layer, LayerSpec, Sequential, Trace};
use crate::error::{invalid, Error, Result};
use crate::rng::{MaskSeed, Purpose};
use crate::sparsity::{allocate, init_masks, Allocation, SparsityPlan};
use crate::tensor::Tensor;

/// Block-sequential base architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape, e.g. `[2]` or `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub stem: Vec<LayerSpec>,
    pub blocks: Vec<Vec<LayerSpec>>,
    pub classifier: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Checks block count, per-layer dims and that shapes chain from the
    /// input to `classes` logits.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return invalid("network needs at least one block");
        }
        if self.classes < 2 {
            return invalid(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return invalid(format!("input shape must be non-empty and positive, got {:?}", self.input_shape));
        }
        let mut shape = self.input_shape.clone();
        for layer in self.all_layers() {
            layer.validate()?;
            shape = layer.output_shape(&shape)?;
        }
        if shape != [self.classes] {
            return Err(Error::Shape {
                context: "classifier output".into(),
                expected: vec![self.classes],
                got: shape,
            });
        }
        Ok(())
    }

    pub fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.stem
            .iter()
            .chain(self.blocks.iter().flatten())
            .chain(self.classifier.iter())
    }

    /// Stem plus blocks `1..=split`.
    pub fn backbone_layers(&self, split: usize) -> Vec<LayerSpec> {
        self.stem
            .iter()
            .chain(self.blocks[..split].iter().flatten())
            .cloned()
            .collect()
    }

    /// Blocks `split+1..=L` plus the classifier.
    pub fn head_layers(&self, split: usize) -> Vec<LayerSpec> {
        self.blocks[split..]
            .iter()
            .flatten()
            .chain(self.classifier.iter())
            .cloned()
            .collect()
    }

    /// A plain MLP: `input → width` stem, `blocks` blocks of
    /// `linear(width, width) + relu`, and a linear classifier.
    pub fn mlp(inputs: usize, width: usize, blocks: usize, classes: usize) -> Self {
        Self {
            input_shape: vec![inputs],
            classes,
            stem: vec![LayerSpec::linear(inputs, width), LayerSpec::Relu],
            blocks: (0..blocks)
                .map(|_| vec![LayerSpec::linear(width, width), LayerSpec::Relu])
                .collect(),
            classifier: vec![LayerSpec::linear(width, classes)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Average per-head softmax probabilities.
    #[default]
    Probs,
    /// Average logits, then softmax.
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    /// Shared backbone, heads trained on the composite loss.
    Trails,
    /// Fully independent members (empty backbone), trained separately.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec {
    pub ratio: f64,
    pub allocation: Allocation,
}

impl SparsitySpec {
    pub fn dense() -> Self {
        Self {
            ratio: 0.0,
            allocation: Allocation::Uniform,
        }
    }
}

/// Component id 0 is the backbone, `i + 1` is head `i`.
pub fn component_id(head: Option<usize>) -> u64 {
    head.map_or(0, |h| h as u64 + 1)
}

pub fn component_label(head: Option<usize>) -> String {
    head.map_or_else(|| "backbone".to_string(), |h| format!("head{h}"))
}

#[derive(Debug)]
pub struct TrailsModel {
    pub spec: NetworkSpec,
    pub split: usize,
    pub kind: EnsembleKind,
    pub backbone: Sequential,
    pub heads: Vec<Sequential>,
    pub backbone_plan: Option<SparsityPlan>,
    pub head_plan: Option<SparsityPlan>,
    pub vote: VoteMode,
    backbone_evals: AtomicU64,
}

impl Clone for TrailsModel {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            split: self.split,
            kind: self.kind,
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            backbone_plan: self.backbone_plan.clone(),
            head_plan: self.head_plan.clone(),
            vote: self.vote,
            backbone_evals: AtomicU64::new(self.backbone_evals()),
        }
    }
}

impl PartialEq for TrailsModel {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.split == other.split
            && self.kind == other.kind
            && self.backbone == other.backbone
            && self.heads == other.heads
    }
}

/// Initialize one component's layers and masks from its own streams.
fn build_component(
    layers: &[LayerSpec],
    sparsity: SparsitySpec,
    seed: u64,
    component: u64,
) -> Result<(Sequential, Option<SparsityPlan>)> {
    let mut built = Vec::with_capacity(layers.len());
    for (li, spec) in layers.iter().enumerate() {
        let mut rng = MaskSeed::new(seed, component, li as u64).rng(Purpose::WeightInit);
        built.push(Layer::init(spec.clone(), &mut rng)?);
    }
    let mut net = Sequential::new(built);
    if !layers.iter().any(LayerSpec::is_maskable) {
        return Ok((net, None));
    }
    let plan = allocate(layers, sparsity.ratio, sparsity.allocation)?;
    let masks = init_masks(&plan, seed, component)?;
    for (budget, mask) in plan.layers.iter().zip(masks) {
        net.layers[budget.layer]
            .weight
            .as_mut()
            .expect("maskable layer has weight")
            .set_mask(mask)?;
    }
    Ok((net, Some(plan)))
}

/// Split `spec` after block `split` into a shared backbone and `heads`
/// independently initialized heads. Each component is allocated to the
/// target sparsity on its own.
pub fn build_trails(spec: &NetworkSpec, split: usize, heads: usize, sparsity: SparsitySpec, seed: u64) -> Result<TrailsModel> {
    spec.validate()?;
    if split > spec.num_blocks() {
        return invalid(format!("split index {split} out of range 0..={}", spec.num_blocks()));
    }
    if heads < 1 {
        return invalid("need at least one head");
    }
    let (backbone, backbone_plan) = build_component(&spec.backbone_layers(split), sparsity, seed, component_id(None))?;
    let head_layers = spec.head_layers(split);
    let mut built = Vec::with_capacity(heads);
    let mut head_plan = None;
    for h in 0..heads {
        let (net, plan) = build_component(&head_layers, sparsity, seed, component_id(Some(h)))?;
        built.push(net);
        head_plan = plan;
    }
    Ok(TrailsModel {
        spec: spec.clone(),
        split,
        kind: EnsembleKind::Trails,
        backbone,
        heads: built,
        backbone_plan,
        head_plan,
        vote: VoteMode::Probs,
        backbone_evals: AtomicU64::new(0),
    })
}

/// `members` complete copies of the network (own stem, blocks and
/// classifier each), for independently trained full-ensemble baselines.
pub fn build_independent_ensemble(spec: &NetworkSpec, members: usize, sparsity: SparsitySpec, seed: u64) -> Result<TrailsModel> {
    spec.validate()?;
    if members < 1 {
        return invalid("need at least one member");
    }
    let layers: Vec<LayerSpec> = spec.all_layers().cloned().collect();
    let mut heads = Vec::with_capacity(members);
    let mut head_plan = None;
    for m in 0..members {
        let (net, plan) = build_component(&layers, sparsity, seed, component_id(Some(m)))?;
        heads.push(net);
        head_plan = plan;
    }
    Ok(TrailsModel {
        spec: spec.clone(),
        split: 0,
        kind: EnsembleKind::Independent,
        backbone: Sequential::default(),
        heads,
        backbone_plan: None,
        head_plan,
        vote: VoteMode::Probs,
        backbone_evals: AtomicU64::new(0),
    })
}

/// Per-head logits plus the cached backbone activation they were computed from.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub logits: Vec<Tensor>,
    pub backbone: Tensor,
}

impl HeadOutputs {
    /// Argmax class of every head for every sample (ties to the lower class).
    pub fn head_predictions(&self) -> Vec<Vec<usize>> {
        self.logits
            .iter()
            .map(|l| (0..l.rows()).map(|r| argmax_f32(l.row(r))).collect())
            .collect()
    }
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gradients for every component of a model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub backbone: GradientSet,
    pub heads: Vec<GradientSet>,
}

impl TrailsModel {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// How many times the backbone has been evaluated.
    pub fn backbone_evals(&self) -> u64 {
        self.backbone_evals.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape()[1..] != self.spec.input_shape[..] {
            let mut expected = vec![x.rows()];
            expected.extend(&self.spec.input_shape);
            return Err(Error::Shape {
                context: "model input".into(),
                expected,
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Backbone once, then every head on the cached activation.
    pub fn forward_heads(&self, x: &Tensor) -> Result<HeadOutputs> {
        self.check_input(x)?;
        let h = self.backbone.forward(x)?;
        self.backbone_evals.fetch_add(1, Ordering::Relaxed);
        let logits = self.heads.iter().map(|head| head.forward(&h)).collect::<Result<_>>()?;
        Ok(HeadOutputs { logits, backbone: h })
    }

    /// Mean of the per-head cross-entropies.
    pub fn composite_loss(outputs: &HeadOutputs, targets: &[usize]) -> Result<f64> {
        if outputs.logits.is_empty() {
            return invalid("no heads");
        }
        let mut total = 0.0;
        for l in &outputs.logits {
            total += loss_forward(l, targets)?.loss;
        }
        Ok(total / outputs.logits.len() as f64)
    }

    /// Composite loss and its gradient for every component. The backbone
    /// receives the sum of the heads' input gradients, each scaled by 1/M.
    pub fn loss_and_grads(&self, x: &Tensor, targets: &[usize], dense: bool) -> Result<(f64, ModelGrads)> {
        self.check_input(x)?;
        let (h, bb_trace) = self.backbone.forward_recorded(x)?;
        self.backbone_evals.fetch_add(1, Ordering::Relaxed);
        let scale = 1.0 / self.heads.len() as f64;
        let mut total = 0.0;
        let mut head_grads = Vec::with_capacity(self.heads.len());
        let mut grad_h: Option<Vec<f64>> = None;
        for head in &self.heads {
            let (logits, trace) = head.forward_recorded(&h)?;
            let ce = loss_forward(&logits, targets)?;
            total += ce.loss;
            let (g, gx) = head.backward(&trace, &ce.grad(scale), dense)?;
            head_grads.push(g);
            match grad_h.as_mut() {
                Some(acc) => acc.iter_mut().zip(gx.data()).for_each(|(a, &v)| *a += v as f64),
                None => grad_h = Some(gx.data().iter().map(|&v| v as f64).collect()),
            }
        }
        let grad_h = Tensor::new(
            h.shape().to_vec(),
            grad_h.expect("at least one head").into_iter().map(|v| v as f32).collect(),
        )?;
        let backbone = if self.backbone.is_empty() {
            GradientSet {
                layers: Vec::new(),
                dense,
            }
        } else {
            self.backbone.backward(&bb_trace, &grad_h, dense)?.0
        };
        Ok((
            total * scale,
            ModelGrads {
                backbone,
                heads: head_grads,
            },
        ))
    }

    /// Loss and gradients of a single head on its own (no 1/M scaling),
    /// used for independently trained members.
    pub fn member_loss_and_grads(&self, member: usize, x: &Tensor, targets: &[usize], dense: bool) -> Result<(f64, GradientSet)> {
        self.check_input(x)?;
        let (h, _) = self.backbone.forward_recorded(x)?;
        let head = &self.heads[member];
        let (logits, trace): (Tensor, Trace) = head.forward_recorded(&h)?;
        let ce = loss_forward(&logits, targets)?;
        let (g, _) = head.backward(&trace, &ce.grad(1.0), dense)?;
        Ok((ce.loss, g))
    }

    /// Every component with its id and label: backbone first (if it has
    /// layers), then heads in order.
    pub fn components_mut(&mut self) -> Vec<(Option<usize>, &mut Sequential)> {
        let mut out: Vec<(Option<usize>, &mut Sequential)> = Vec::with_capacity(self.heads.len() + 1);
        out.push((None, &mut self.backbone));
        out.extend(self.heads.iter_mut().enumerate().map(|(i, h)| (Some(i), h)));
        out
    }

    pub fn components(&self) -> Vec<(Option<usize>, &Sequential)> {
        let mut out: Vec<(Option<usize>, &Sequential)> = vec![(None, &self.backbone)];
        out.extend(self.heads.iter().enumerate().map(|(i, h)| (Some(i), h)));
        out
    }

    /// Count of active maskable weights across all components.
    pub fn active_weights(&self) -> usize {
        self.components()
            .iter()
            .flat_map(|(_, c)| c.layers.iter())
            .filter_map(|l| l.weight.as_ref())
            .map(|w| w.active_count())
            .sum()
    }

    pub fn maskable_weights(&self) -> usize {
        self.components()
            .iter()
            .flat_map(|(_, c)| c.layers.iter())
            .filter_map(|l| l.weight.as_ref())
            .map(|w| w.len())
            .sum()
    }

    /// Global sparsity over all maskable weights.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active_weights() as f64 / self.maskable_weights() as f64
    }

    pub fn masks_hold(&self) -> bool {
        self.components().iter().all(|(_, c)| c.masks_hold())
    }
}

/// Soft-voted ensemble probabilities and predicted classes.
pub fn soft_vote(outputs: &HeadOutputs, mode: VoteMode) -> (Vec<Vec<f64>>, Vec<usize>) {
    let m = outputs.logits.len() as f64;
    let rows = outputs.logits.first().map_or(0, Tensor::rows);
    let probs: Vec<Vec<f64>> = match mode {
        VoteMode::Probs => {
            let per_head: Vec<Vec<Vec<f64>>> = outputs.logits.iter().map(softmax_rows).collect();
            (0..rows)
                .map(|r| {
                    let classes = per_head[0][r].len();
                    (0..classes)
                        .map(|c| per_head.iter().map(|h| h[r][c]).sum::<f64>() / m)
                        .collect()
                })
                .collect()
        }
        VoteMode::Logits => {
            let first = &outputs.logits[0];
            let mean: Vec<f32> = (0..first.len())
                .map(|i| (outputs.logits.iter().map(|l| l.data()[i] as f64).sum::<f64>() / m) as f32)
                .collect();
            let t = Tensor::new(first.shape().to_vec(), mean).expect("logit shape");
            softmax_rows(&t)
        }
    };
    let preds = probs.iter().map(|p| argmax(p)).collect();
    (probs, preds)
}

/// Mean per-head probabilities of already-normalized head probabilities.
pub fn average_probs(per_head: &[Vec<Vec<f64>>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let m = per_head.len() as f64;
    let probs: Vec<Vec<f64>> = (0..per_head[0].len())
        .map(|r| {
            (0..per_head[0][r].len())
                .map(|c| per_head.iter().map(|h| h[r][c]).sum::<f64>() / m)
                .collect()
        })
        .collect();
    let preds = probs.iter().map(|p| argmax(p)).collect();
    (probs, preds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetworkSpec {
        NetworkSpec::mlp(3, 6, 4, 3)
    }

    fn batch() -> Tensor {
        Tensor::new(vec![5, 3], (0..15).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect()).unwrap()
    }

    #[test]
    fn single_dense_head_is_base_network() {
        let s = spec();
        let m = build_trails(&s, s.num_blocks(), 1, SparsitySpec::dense(), 1).unwrap();
        assert_eq!(m.backbone.layers.len() + m.heads[0].layers.len(), s.all_layers().count());
        assert_eq!(m.sparsity(), 0.0);
        let mut whole = m.backbone.layers.clone();
        whole.extend(m.heads[0].layers.clone());
        let plain = Sequential::new(whole).forward(&batch()).unwrap();
        let out = m.forward_heads(&batch()).unwrap();
        assert_eq!(out.logits[0], plain);
    }

    #[test]
    fn split_zero_keeps_only_stem_shared() {
        let s = spec();
        let m = build_trails(&s, 0, 3, SparsitySpec::dense(), 1).unwrap();
        assert_eq!(m.backbone.specs(), s.stem);
        assert_eq!(m.heads[0].layers.len(), 4 * 2 + 1);
        assert!(build_trails(&s, 5, 3, SparsitySpec::dense(), 1).is_err());
        assert!(build_trails(&s, 2, 0, SparsitySpec::dense(), 1).is_err());
    }

    #[test]
    fn builds_are_deterministic_and_heads_distinct() {
        let s = spec();
        let sp = SparsitySpec {
            ratio: 0.5,
            allocation: Allocation::Er,
        };
        let a = build_trails(&s, 2, 3, sp, 7).unwrap();
        let b = build_trails(&s, 2, 3, sp, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.heads[0], a.heads[1]);
        let masks = |h: &Sequential| h.layers[0].weight.as_ref().unwrap().mask().to_vec();
        assert_ne!(masks(&a.heads[0]), masks(&a.heads[1]));
    }

    #[test]
    fn backbone_once_per_batch() {
        let s = spec();
        let m = build_trails(&s, 2, 4, SparsitySpec::dense(), 1).unwrap();
        m.forward_heads(&batch()).unwrap();
        m.forward_heads(&batch()).unwrap();
        assert_eq!(m.backbone_evals(), 2);
    }

    #[test]
    fn identical_heads_agree() {
        let s = spec();
        let mut m = build_trails(&s, 2, 3, SparsitySpec::dense(), 1).unwrap();
        let h0 = m.heads[0].clone();
        m.heads.iter_mut().for_each(|h| *h = h0.clone());
        let out = m.forward_heads(&batch()).unwrap();
        assert_eq!(out.logits[0], out.logits[1]);
        let y = [0, 1, 2, 0, 1];
        let single = loss_forward(&out.logits[0], &y).unwrap().loss;
        assert!((TrailsModel::composite_loss(&out, &y).unwrap() - single).abs() < 1e-12);
        let (probs, _) = soft_vote(&out, VoteMode::Probs);
        for (a, b) in probs.iter().flatten().zip(softmax_rows(&out.logits[0]).iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroing_one_head_leaves_others() {
        let s = spec();
        let mut m = build_trails(&s, 2, 3, SparsitySpec::dense(), 1).unwrap();
        let before = m.forward_heads(&batch()).unwrap();
        for l in &mut m.heads[1].layers {
            if let Some(w) = l.weight.as_mut() {
                w.update_values(|v| v.fill(0.0));
            }
        }
        let after = m.forward_heads(&batch()).unwrap();
        assert_eq!(before.logits[0], after.logits[0]);
        assert_eq!(before.logits[2], after.logits[2]);
        assert_ne!(before.logits[1], after.logits[1]);
    }

    #[test]
    fn soft_vote_hand_average() {
        let ln = |p: &[f64]| p.iter().map(|v| v.ln() as f32).collect::<Vec<_>>();
        let outputs = HeadOutputs {
            logits: vec![
                Tensor::new(vec![1, 2], ln(&[0.6, 0.4])).unwrap(),
                Tensor::new(vec![1, 2], ln(&[0.2, 0.8])).unwrap(),
                Tensor::new(vec![1, 2], ln(&[0.55, 0.45])).unwrap(),
            ],
            backbone: Tensor::zeros(vec![1, 1]),
        };
        let (probs, preds) = soft_vote(&outputs, VoteMode::Probs);
        assert!((probs[0][0] - 0.45).abs() < 1e-7);
        assert!((probs[0][1] - 0.55).abs() < 1e-7);
        assert_eq!(preds, vec![1]);
    }

    #[test]
    fn composite_is_mean_of_head_losses() {
        let s = spec();
        let m = build_trails(&s, 1, 2, SparsitySpec::dense(), 3).unwrap();
        let out = m.forward_heads(&batch()).unwrap();
        let y = [0, 1, 2, 0, 1];
        let l0 = loss_forward(&out.logits[0], &y).unwrap().loss;
        let l1 = loss_forward(&out.logits[1], &y).unwrap().loss;
        assert!((TrailsModel::composite_loss(&out, &y).unwrap() - (l0 + l1) / 2.0).abs() < 1e-12);
        let (l, _) = m.loss_and_grads(&batch(), &y, false).unwrap();
        assert!((l - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let s = spec();
        let m = build_trails(&s, 1, 2, SparsitySpec::dense(), 3).unwrap();
        assert!(m.forward_heads(&Tensor::zeros(vec![2, 4])).is_err());
    }

    #[test]
    fn independent_members_have_own_stems() {
        let s = spec();
        let m = build_independent_ensemble(&s, 3, SparsitySpec::dense(), 2).unwrap();
        assert!(m.backbone.is_empty());
        assert_eq!(m.heads[0].layers.len(), s.all_layers().count());
        assert_ne!(m.heads[0].layers[0], m.heads[1].layers[0]);
    }
}

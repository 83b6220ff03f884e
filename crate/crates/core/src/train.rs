//! The training loop: composite-loss steps, scheduled topology updates,
//! periodic evaluation and analytic FLOPs accounting.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientSet, LayerSpec, Sequential};
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{config_err, invalid, Error, Result};
use crate::metrics::{self, FlopsSnapshot, MetricsReport, PdMode, ECE_BINS};
use crate::model::{component_id, component_label, soft_vote, EnsembleKind, TrailsModel, VoteMode};
use crate::optim::{lr_at, optimizer_step, ComponentState, LrSchedule, Optimizer};
use crate::rng::{stream_seed, Purpose};
use crate::tensor::Tensor;
use crate::topology::{
    drop_fraction, one_shot_global_prune, topology_update, LayerUpdate, Strategy, TopologySchedule, UpdateRecord,
    UpdateStreams,
};

const EVAL_CHUNK: usize = 1024;

fn constant() -> LrSchedule {
    LrSchedule::Constant
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    /// Base learning rate η.
    pub lr: f64,
    #[serde(default = "constant")]
    pub schedule: LrSchedule,
    pub batch_size: usize,
    /// Total optimizer steps T.
    pub steps: usize,
    /// Step count of the dense baseline this run is budgeted against.
    /// Defaults to `steps`.
    #[serde(default)]
    pub base_steps: Option<usize>,
    pub topology: TopologySchedule,
    /// Target sparsity of the one-shot prune (`prune_oneshot` only). Set
    /// by the caller, not read from JSON.
    #[serde(skip)]
    pub prune_sparsity: Option<f64>,
    pub eval_interval: usize,
    #[serde(default)]
    pub pd_mode: PdMode,
    #[serde(default)]
    pub vote: VoteMode,
    #[serde(default = "default_true")]
    pub drop_last: bool,
    /// Seed of the data-order and topology streams. Set by the caller,
    /// not read from JSON.
    #[serde(skip)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, lr: f64, batch_size: usize, steps: usize, topology: TopologySchedule, seed: u64) -> Self {
        Self {
            optimizer,
            lr,
            schedule: LrSchedule::Constant,
            batch_size,
            steps,
            base_steps: None,
            topology,
            prune_sparsity: None,
            eval_interval: steps.max(1),
            pd_mode: PdMode::Pairwise,
            vote: VoteMode::Probs,
            drop_last: true,
            seed,
        }
    }

    pub fn base_steps(&self) -> usize {
        self.base_steps.unwrap_or(self.steps)
    }

    /// Field-level validation; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        if let Err(e) = self.optimizer.validate() {
            return config_err("optimizer", e);
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err("lr", format!("must be a positive finite number, got {}", self.lr));
        }
        if let Err(e) = self.schedule.validate() {
            return config_err("schedule", e);
        }
        if self.batch_size < 1 {
            return config_err("batch_size", "must be >= 1");
        }
        if self.steps < 1 {
            return config_err("steps", "must be >= 1");
        }
        if self.base_steps == Some(0) {
            return config_err("base_steps", "must be >= 1");
        }
        if let Err((field, e)) = self.topology.validate() {
            return config_err(format!("topology.{field}"), e);
        }
        match (self.topology.strategy, self.prune_sparsity) {
            (Strategy::PruneOneshot, None) => {
                return config_err("prune_sparsity", "required by the prune_oneshot strategy");
            }
            (Strategy::PruneOneshot, Some(s)) if !(0.0..1.0).contains(&s) => {
                return config_err("prune_sparsity", format!("must be in [0, 1), got {s}"));
            }
            (Strategy::PruneOneshot, Some(_)) => {}
            (other, Some(_)) => {
                return config_err("prune_sparsity", format!("only valid with prune_oneshot, not {other:?}"));
            }
            (_, None) => {}
        }
        if self.eval_interval < 1 {
            return config_err("eval_interval", "must be >= 1");
        }
        Ok(())
    }
}

/// Largest step count a run at sparsity `s` may use in place of
/// `base_steps` dense steps: `floor(base_steps / (1 − s))`.
pub fn extension_cap(s: f64, base_steps: usize) -> Result<usize> {
    if !(0.0..1.0).contains(&s) {
        return invalid(format!("sparsity must be in [0, 1), got {s}"));
    }
    let exact = base_steps as f64 / (1.0 - s);
    // absorb representation error of 1 − s (e.g. 250 / 0.19999999999999996)
    Ok((exact * (1.0 + 1e-12)).floor() as usize)
}

/// Per-sample forward FLOPs of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    /// Ensemble inference FLOPs with the current masks (f_S).
    pub forward_sparse: f64,
    /// Same with all masks on (f_D).
    pub forward_dense: f64,
    /// One training step per sample: 3·f_S.
    pub train_step_per_sample: f64,
}

impl FlopsLedger {
    pub fn train_step(&self, batch: usize) -> f64 {
        self.train_step_per_sample * batch as f64
    }
}

/// Forward FLOPs of one layer for one sample. Linear: 2 per active weight
/// plus one add per bias. Conv: 2 per active kernel weight per output
/// position plus one add per output element with bias. ReLU: one per
/// input element.
pub fn layer_flops(spec: &LayerSpec, input: &[usize], active: usize) -> Result<f64> {
    let out = spec.output_shape(input)?;
    Ok(match spec {
        LayerSpec::Linear { out_features, bias, .. } => {
            2.0 * active as f64 + if *bias { *out_features as f64 } else { 0.0 }
        }
        LayerSpec::Conv2d { bias, .. } => {
            let positions = (out[1] * out[2]) as f64;
            let bias_adds = if *bias { out.iter().product::<usize>() as f64 } else { 0.0 };
            2.0 * active as f64 * positions + bias_adds
        }
        LayerSpec::Relu => input.iter().product::<usize>() as f64,
    })
}

/// Forward FLOPs of a component (per sample) and its output shape.
pub fn net_flops(net: &Sequential, input: &[usize], dense: bool) -> Result<(f64, Vec<usize>)> {
    let mut shape = input.to_vec();
    let mut total = 0.0;
    for layer in &net.layers {
        let active = match &layer.weight {
            Some(w) if !dense => w.active_count(),
            Some(w) => w.len(),
            None => 0,
        };
        total += layer_flops(&layer.spec, &shape, active)?;
        shape = layer.spec.output_shape(&shape)?;
    }
    Ok((total, shape))
}

fn ensemble_flops(model: &TrailsModel, dense: bool) -> Result<f64> {
    let (bb, h_shape) = net_flops(&model.backbone, &model.spec.input_shape, dense)?;
    let mut total = bb;
    for head in &model.heads {
        total += net_flops(head, &h_shape, dense)?.0;
    }
    Ok(total)
}

/// f_S, f_D and the per-sample training-step cost of `model`.
pub fn count_flops(model: &TrailsModel) -> Result<FlopsLedger> {
    let forward_sparse = ensemble_flops(model, false)?;
    Ok(FlopsLedger {
        forward_sparse,
        forward_dense: ensemble_flops(model, true)?,
        train_step_per_sample: 3.0 * forward_sparse,
    })
}

/// Largest forward cost any mask with `keep` active weights can have:
/// the dense cost minus all weight terms, plus the `keep` most expensive.
fn max_forward_with(model: &TrailsModel, keep: usize) -> Result<f64> {
    let mut per_weight: Vec<(f64, usize)> = Vec::new();
    let mut walk = |net: &Sequential, input: &[usize]| -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &net.layers {
            if let Some(w) = &layer.weight {
                let cost = layer_flops(&layer.spec, &shape, 1)? - layer_flops(&layer.spec, &shape, 0)?;
                per_weight.push((cost, w.len()));
            }
            shape = layer.spec.output_shape(&shape)?;
        }
        Ok(shape)
    };
    let h_shape = walk(&model.backbone, &model.spec.input_shape)?;
    for head in &model.heads {
        walk(head, &h_shape)?;
    }
    let dense = ensemble_flops(model, true)?;
    let all_weights: f64 = per_weight.iter().map(|&(c, n)| c * n as f64).sum();
    per_weight.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut left = keep;
    let mut kept = 0.0;
    for (c, n) in per_weight {
        let take = n.min(left);
        kept += c * take as f64;
        left -= take;
    }
    Ok(dense - all_weights + kept)
}

/// Projected training cost of a run against its dense baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsBudget {
    /// Upper bound on the run's cumulative training FLOPs.
    pub projected: f64,
    /// 3·f_D·base_steps·batch.
    pub dense_baseline: f64,
    pub step_cap: usize,
}

/// Check the sparse-training extension rule for `model` trained under
/// `cfg`: the step count must be within the cap and the projected
/// training FLOPs must not exceed the dense baseline's.
pub fn check_budget(model: &TrailsModel, cfg: &TrainConfig) -> Result<FlopsBudget> {
    let ledger = count_flops(model)?;
    let batch = cfg.batch_size as f64;
    let base = cfg.base_steps();
    let (s, projected) = match (cfg.topology.strategy, cfg.prune_sparsity) {
        (Strategy::PruneOneshot, Some(s)) => {
            let prune_at = cfg.topology.prune_step(cfg.steps).unwrap_or(cfg.steps);
            let keep = crate::sparsity::global_budget(model.maskable_weights(), s);
            let after = max_forward_with(model, keep)?;
            let dense_part = 3.0 * ledger.forward_dense * prune_at as f64;
            let sparse_part = 3.0 * after * (cfg.steps - prune_at) as f64;
            (s, (dense_part + sparse_part) * batch)
        }
        _ => (model.sparsity(), ledger.train_step(cfg.batch_size) * cfg.steps as f64),
    };
    let step_cap = extension_cap(s, base)?;
    let dense_baseline = 3.0 * ledger.forward_dense * base as f64 * batch;
    if cfg.steps > step_cap {
        return config_err(
            "steps",
            format!("{} exceeds the extension cap {step_cap} for sparsity {s} and base_steps {base}", cfg.steps),
        );
    }
    if projected > dense_baseline {
        return config_err(
            "steps",
            format!("projected training FLOPs {projected:e} exceed the dense baseline {dense_baseline:e}"),
        );
    }
    Ok(FlopsBudget {
        projected,
        dense_baseline,
        step_cap,
    })
}

/// Ensemble evaluation on a dataset: the report plus the raw predictions
/// it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub head_predictions: Vec<Vec<usize>>,
    pub ensemble_predictions: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

pub fn evaluate(model: &TrailsModel, data: &Dataset, pd_mode: PdMode) -> Result<Evaluation> {
    if data.is_empty() {
        return invalid("cannot evaluate on an empty dataset");
    }
    let m = model.num_heads();
    let mut head_predictions = vec![Vec::with_capacity(data.len()); m];
    let mut ensemble_predictions = Vec::with_capacity(data.len());
    let mut probs = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        let out = model.forward_heads(&x)?;
        for (acc, preds) in head_predictions.iter_mut().zip(out.head_predictions()) {
            acc.extend(preds);
        }
        let (p, pred) = soft_vote(&out, model.vote);
        probs.extend(p);
        ensemble_predictions.extend(pred);
    }
    if probs.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("ensemble probabilities".into()));
    }
    let labels = &data.labels;
    let nll = metrics::nll(&probs, labels)?;
    let report = MetricsReport {
        step: 0,
        accuracy: metrics::accuracy(&ensemble_predictions, labels)?,
        nll,
        ece: metrics::ece(&probs, labels, ECE_BINS)?,
        pd: if m > 1 {
            Some(metrics::prediction_disagreement(&head_predictions, pd_mode)?)
        } else {
            None
        },
        perplexity: metrics::perplexity(nll),
        head_accuracy: head_predictions
            .iter()
            .map(|p| metrics::accuracy(p, labels))
            .collect::<Result<_>>()?,
        flops: FlopsSnapshot::default(),
    };
    Ok(Evaluation {
        report,
        head_predictions,
        ensemble_predictions,
        probs,
    })
}

/// One history line, written at every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub lr: f64,
    pub drop_fraction: f64,
    pub sparsity: f64,
    pub metrics: MetricsReport,
    /// Topology updates applied since the previous record.
    pub updates: Vec<UpdateRecord>,
}

/// Everything that changes while training. Random decisions come from
/// streams addressed by (seed, purpose, component, step), so no generator
/// state needs to be carried.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: usize,
    pub model: TrailsModel,
    /// Backbone first, then one entry per head.
    pub optim: Vec<ComponentState>,
    pub train_flops: f64,
    pub loss_sum: f64,
    pub loss_count: usize,
    pub pending_updates: Vec<UpdateRecord>,
}

impl TrainState {
    pub fn new(mut model: TrailsModel, cfg: &TrainConfig) -> Self {
        model.vote = cfg.vote;
        let optim = model
            .components()
            .iter()
            .map(|(_, c)| ComponentState::new(c, &cfg.optimizer))
            .collect();
        Self {
            step: 0,
            model,
            optim,
            train_flops: 0.0,
            loss_sum: 0.0,
            loss_count: 0,
            pending_updates: Vec::new(),
        }
    }

    pub fn optimizer_slots_clean(&self) -> bool {
        self.model
            .components()
            .iter()
            .zip(&self.optim)
            .all(|((_, c), s)| s.masked_slots_zero(c))
    }
}

pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    budget: FlopsBudget,
}

fn diverged<T>(step: usize, reason: impl Into<String>) -> Result<T> {
    Err(Error::Diverged {
        step,
        reason: reason.into(),
    })
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, model: &TrailsModel, train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        for (name, d) in [("train", train), ("test", test)] {
            if d.is_empty() {
                return invalid(format!("{name} dataset is empty"));
            }
            if d.sample_shape() != model.spec.input_shape.as_slice() {
                return invalid(format!(
                    "{name} samples have shape {:?}, model expects {:?}",
                    d.sample_shape(),
                    model.spec.input_shape
                ));
            }
            if d.classes > model.spec.classes {
                return invalid(format!(
                    "{name} dataset has {} classes, model outputs {}",
                    d.classes, model.spec.classes
                ));
            }
        }
        if cfg.drop_last && cfg.batch_size > train.len() {
            return config_err(
                "batch_size",
                format!("{} exceeds the {} training samples", cfg.batch_size, train.len()),
            );
        }
        if cfg.topology.strategy == Strategy::PruneOneshot && model.sparsity() > 0.0 {
            return invalid("prune_oneshot expects a dense model");
        }
        let budget = check_budget(model, cfg)?;
        Ok(Self {
            cfg,
            train,
            test,
            budget,
        })
    }

    pub fn budget(&self) -> FlopsBudget {
        self.budget
    }

    pub fn config(&self) -> &TrainConfig {
        self.cfg
    }

    fn batch_for(&self, stream_key: u64, t: usize) -> Result<(Tensor, Vec<usize>)> {
        let plan = BatchPlan {
            batch_size: self.cfg.batch_size,
            seed: stream_seed(self.cfg.seed, &[Purpose::Shuffle as u64, stream_key]),
            drop_last: self.cfg.drop_last,
        };
        let n = self.train.len();
        let per_epoch = if plan.drop_last {
            n / plan.batch_size
        } else {
            n.div_ceil(plan.batch_size)
        };
        let epoch = (t - 1) / per_epoch;
        let list = batches(n, &plan, epoch as u64)?;
        Ok(self.train.batch(&list[(t - 1) % per_epoch]))
    }

    /// Run step `state.step + 1`. Returns a history record on evaluation steps.
    pub fn step(&self, st: &mut TrainState) -> Result<Option<HistoryRecord>> {
        let horizon = self.cfg.steps;
        let t = st.step + 1;
        if t > horizon {
            return invalid(format!("training already finished at step {horizon}"));
        }
        let sched = &self.cfg.topology;
        let update = sched.is_update_step(t, horizon);
        let dense = update && sched.strategy == Strategy::Rigl;
        let lr = lr_at(t, horizon, self.cfg.lr, &self.cfg.schedule)?;
        let ledger = count_flops(&st.model)?;

        // gradients for every component, backbone first
        let computed: Result<(f64, Vec<GradientSet>, usize)> = (|| match st.model.kind {
            EnsembleKind::Trails => {
                let (x, y) = self.batch_for(0, t)?;
                let (loss, g) = st.model.loss_and_grads(&x, &y, dense)?;
                let mut all = vec![g.backbone];
                all.extend(g.heads);
                Ok((loss, all, y.len()))
            }
            EnsembleKind::Independent => {
                let mut all = vec![GradientSet {
                    layers: Vec::new(),
                    dense,
                }];
                let mut total = 0.0;
                let mut len = 0;
                for m in 0..st.model.num_heads() {
                    let (x, y) = self.batch_for(m as u64 + 1, t)?;
                    let (loss, g) = st.model.member_loss_and_grads(m, &x, &y, dense)?;
                    total += loss;
                    all.push(g);
                    len = y.len();
                }
                Ok((total / st.model.num_heads() as f64, all, len))
            }
        })();
        let (loss, grads, batch_len) = match computed {
            Ok(v) => v,
            Err(Error::NonFinite(what)) => return diverged(t, what),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return diverged(t, format!("training loss is {loss}"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return diverged(t, "non-finite gradient");
        }

        if update {
            let seed = self.cfg.seed;
            let comps = st.model.components_mut();
            for (((head, net), state), g) in comps.into_iter().zip(st.optim.iter_mut()).zip(&grads) {
                if net.maskable_indices().is_empty() {
                    continue;
                }
                let streams = UpdateStreams {
                    seed,
                    component: component_id(head),
                };
                let rec = topology_update(
                    net,
                    state,
                    dense.then_some(g),
                    sched,
                    t,
                    horizon,
                    streams,
                    &component_label(head),
                )?;
                st.pending_updates.push(rec);
            }
        }

        let opt = self.cfg.optimizer;
        for (((_, net), state), g) in st.model.components_mut().into_iter().zip(st.optim.iter_mut()).zip(&grads) {
            if net.is_empty() {
                continue;
            }
            optimizer_step(net, g, state, &opt, lr).or_else(|e| match e {
                Error::NonFinite(what) => diverged(t, what),
                other => Err(other),
            })?;
        }
        // samples per member are the same for every member
        st.train_flops += ledger.train_step(batch_len);

        if sched.prune_step(horizon) == Some(t) {
            self.prune_oneshot(st, t)?;
        }

        st.loss_sum += loss;
        st.loss_count += 1;
        st.step = t;
        if t % self.cfg.eval_interval == 0 || t == horizon {
            return self.record(st, lr).map(Some);
        }
        Ok(None)
    }

    fn prune_oneshot(&self, st: &mut TrainState, t: usize) -> Result<()> {
        let s = self.cfg.prune_sparsity.expect("validated");
        let before: Vec<Vec<(usize, Vec<bool>)>> = st
            .model
            .components()
            .iter()
            .map(|(_, c)| {
                c.maskable_indices()
                    .into_iter()
                    .map(|li| (li, c.layers[li].weight.as_ref().expect("maskable").mask().to_vec()))
                    .collect()
            })
            .collect();
        {
            let mut nets: Vec<&mut Sequential> = st.model.components_mut().into_iter().map(|(_, n)| n).collect();
            one_shot_global_prune(&mut nets, s)?;
        }
        for ((head, net), state) in st.model.components().into_iter().zip(st.optim.iter_mut()).collect::<Vec<_>>() {
            state.reset_masked(net);
            let layers: Vec<LayerUpdate> = before[component_id(head) as usize]
                .iter()
                .map(|(li, old)| {
                    let w = net.layers[*li].weight.as_ref().expect("maskable");
                    LayerUpdate {
                        layer: *li,
                        pruned: (0..old.len()).filter(|&i| old[i] && !w.mask()[i]).collect(),
                        grown: Vec::new(),
                        active_before: old.iter().filter(|&&m| m).count(),
                        active_after: w.active_count(),
                    }
                })
                .collect();
            if !layers.is_empty() {
                st.pending_updates.push(UpdateRecord {
                    step: t,
                    component: component_label(head),
                    drop_fraction: 0.0,
                    layers,
                });
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, st: &TrainState) -> Result<Evaluation> {
        let mut ev = evaluate(&st.model, self.test, self.cfg.pd_mode)?;
        let ledger = count_flops(&st.model)?;
        ev.report.step = st.step;
        ev.report.flops = FlopsSnapshot {
            forward_sparse: ledger.forward_sparse,
            forward_dense: ledger.forward_dense,
            train_total: st.train_flops,
        };
        Ok(ev)
    }

    fn record(&self, st: &mut TrainState, lr: f64) -> Result<HistoryRecord> {
        let ev = self.evaluate(st).or_else(|e| match e {
            Error::NonFinite(what) => diverged(st.step, what),
            other => Err(other),
        })?;
        let sched = &self.cfg.topology;
        let p = match sched.strategy {
            Strategy::Set | Strategy::Rigl => drop_fraction(st.step, self.cfg.steps, sched.initial_drop_fraction)?,
            Strategy::Static | Strategy::PruneOneshot => 0.0,
        };
        let rec = HistoryRecord {
            step: st.step,
            train_loss: st.loss_sum / st.loss_count as f64,
            lr,
            drop_fraction: p,
            sparsity: st.model.sparsity(),
            metrics: ev.report,
            updates: std::mem::take(&mut st.pending_updates),
        };
        st.loss_sum = 0.0;
        st.loss_count = 0;
        Ok(rec)
    }

    /// Train until the horizon, handing every history record to `on_record`.
    pub fn run(
        &self,
        st: &mut TrainState,
        mut on_record: impl FnMut(&HistoryRecord, &TrainState) -> Result<()>,
    ) -> Result<()> {
        while st.step < self.cfg.steps {
            if let Some(rec) = self.step(st)? {
                on_record(&rec, st)?;
            }
        }
        Ok(())
    }
}

/// Train `model` on `train` and return it with the evaluation history
/// (evaluated on `test`).
pub fn fit(
    model: TrailsModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TrailsModel, Vec<HistoryRecord>)> {
    let trainer = Trainer::new(cfg, &model, train, test)?;
    let mut st = TrainState::new(model, cfg);
    let mut history = Vec::new();
    trainer.run(&mut st, |rec, _| {
        history.push(rec.clone());
        Ok(())
    })?;
    Ok((st.model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};
    use crate::model::{build_trails, NetworkSpec, SparsitySpec};
    use crate::sparsity::Allocation;

    fn sgd() -> Optimizer {
        Optimizer::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    fn clusters() -> Dataset {
        gen_synthetic(SyntheticKind::TwoClusters, 200, 0.2, 3).unwrap()
    }

    #[test]
    fn extension_cap_cases() {
        assert_eq!(extension_cap(0.8, 250).unwrap(), 1250);
        assert_eq!(extension_cap(0.0, 250).unwrap(), 250);
        assert_eq!(extension_cap(0.5, 100).unwrap(), 200);
        assert_eq!(extension_cap(0.9, 100).unwrap(), 1000);
        assert!(extension_cap(1.0, 100).is_err());
    }

    #[test]
    fn linear_layer_flops() {
        let spec = LayerSpec::linear(3, 2);
        assert_eq!(layer_flops(&spec, &[3], 6).unwrap(), 14.0);
        assert_eq!(layer_flops(&spec, &[3], 3).unwrap(), 8.0);
        assert_eq!(layer_flops(&LayerSpec::Relu, &[2, 3, 3], 0).unwrap(), 18.0);
    }

    #[test]
    fn train_step_is_three_forwards() {
        let spec = NetworkSpec::mlp(2, 8, 2, 2);
        let sp = SparsitySpec {
            ratio: 0.5,
            allocation: Allocation::Er,
        };
        let m = build_trails(&spec, 1, 3, sp, 1).unwrap();
        let l = count_flops(&m).unwrap();
        assert_eq!(l.train_step_per_sample, 3.0 * l.forward_sparse);
        assert_eq!(l.train_step(10), 30.0 * l.forward_sparse);
        assert!(l.forward_sparse < l.forward_dense);
        let dense = build_trails(&spec, 1, 3, SparsitySpec::dense(), 1).unwrap();
        let d = count_flops(&dense).unwrap();
        assert_eq!(d.forward_sparse, d.forward_dense);
        assert_eq!(d.forward_dense, l.forward_dense);
    }

    #[test]
    fn separable_task_reaches_full_accuracy() {
        let data = clusters();
        let spec = NetworkSpec::mlp(2, 8, 1, 2);
        let model = build_trails(&spec, 1, 1, SparsitySpec::dense(), 5).unwrap();
        let mut cfg = TrainConfig::new(sgd(), 0.1, 20, 200, TopologySchedule::new(Strategy::Static), 5);
        cfg.eval_interval = 50;
        let (model, hist) = fit(model, &data, &data, &cfg).unwrap();
        assert_eq!(hist.len(), 4);
        assert_eq!(hist.last().unwrap().metrics.accuracy, 1.0);
        assert!(hist.last().unwrap().metrics.pd.is_none());
        assert!(model.masks_hold());
    }

    #[test]
    fn runs_are_bit_identical() {
        let data = clusters();
        let spec = NetworkSpec::mlp(2, 8, 2, 2);
        let sp = SparsitySpec {
            ratio: 0.5,
            allocation: Allocation::Er,
        };
        let mut sched = TopologySchedule::new(Strategy::Set);
        sched.update_interval = 10;
        let mut cfg = TrainConfig::new(sgd(), 0.05, 16, 60, sched, 2);
        cfg.eval_interval = 20;
        let run = || {
            let m = build_trails(&spec, 1, 2, sp, 9).unwrap();
            fit(m, &data, &data, &cfg).unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert!(h1.iter().map(|r| r.updates.len()).sum::<usize>() > 0);
    }

    #[test]
    fn interval_beyond_horizon_equals_static() {
        let data = clusters();
        let spec = NetworkSpec::mlp(2, 8, 2, 2);
        let sp = SparsitySpec {
            ratio: 0.5,
            allocation: Allocation::Uniform,
        };
        let mut set = TopologySchedule::new(Strategy::Set);
        set.update_interval = 1000;
        let a = TrainConfig::new(sgd(), 0.05, 16, 50, set, 2);
        let b = TrainConfig::new(sgd(), 0.05, 16, 50, TopologySchedule::new(Strategy::Static), 2);
        let (ma, ha) = fit(build_trails(&spec, 1, 2, sp, 1).unwrap(), &data, &data, &a).unwrap();
        let (mb, hb) = fit(build_trails(&spec, 1, 2, sp, 1).unwrap(), &data, &data, &b).unwrap();
        assert_eq!(ma, mb);
        assert!(ha[0].updates.is_empty());
        assert_eq!(ha[0].metrics, hb[0].metrics);
    }

    #[test]
    fn extension_rule_rejects_overlong_runs() {
        let data = clusters();
        let spec = NetworkSpec::mlp(2, 8, 2, 2);
        let sp = SparsitySpec {
            ratio: 0.5,
            allocation: Allocation::Uniform,
        };
        let m = build_trails(&spec, 1, 1, sp, 1).unwrap();
        let mut cfg = TrainConfig::new(sgd(), 0.05, 16, 250, TopologySchedule::new(Strategy::Static), 2);
        cfg.base_steps = Some(100);
        let err = Trainer::new(&cfg, &m, &data, &data).err().unwrap();
        assert!(err.to_string().contains("steps"), "{err}");
        // uniform S=0.5 leaves biases and relus dense, so even the cap may be too much
        cfg.steps = 150;
        let ok = Trainer::new(&cfg, &m, &data, &data).unwrap().budget();
        assert!(ok.projected <= ok.dense_baseline);
    }

    #[test]
    fn prune_oneshot_hits_target() {
        let data = clusters();
        let spec = NetworkSpec::mlp(2, 8, 2, 2);
        let m = build_trails(&spec, 1, 2, SparsitySpec::dense(), 1).unwrap();
        let mut cfg = TrainConfig::new(sgd(), 0.05, 16, 40, TopologySchedule::new(Strategy::PruneOneshot), 2);
        cfg.prune_sparsity = Some(0.75);
        let trainer = Trainer::new(&cfg, &m, &data, &data).unwrap();
        let mut st = TrainState::new(m, &cfg);
        let mut hist = Vec::new();
        trainer
            .run(&mut st, |r, _| {
                hist.push(r.clone());
                Ok(())
            })
            .unwrap();
        let total = st.model.maskable_weights();
        assert_eq!(st.model.active_weights(), crate::sparsity::global_budget(total, 0.75));
        assert!(st.model.masks_hold());
        assert!(st.optimizer_slots_clean());
        assert!(st.train_flops <= trainer.budget().dense_baseline);
        assert!(!hist[0].updates.is_empty());
    }

    #[test]
    fn rejects_bad_config_fields() {
        let mut cfg = TrainConfig::new(sgd(), 0.0, 16, 40, TopologySchedule::new(Strategy::Static), 2);
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lr"),
            other => panic!("{other:?}"),
        }
        cfg.lr = 0.1;
        cfg.topology.update_interval = 0;
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "topology.update_interval"),
            other => panic!("{other:?}"),
        }
        cfg.topology.update_interval = 10;
        cfg.prune_sparsity = Some(0.5);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let data = clusters();
        let spec = NetworkSpec::mlp(2, 8, 2, 2);
        let m = build_trails(&spec, 1, 1, SparsitySpec::dense(), 1).unwrap();
        let cfg = TrainConfig::new(sgd(), 0.1, 16, 40, TopologySchedule::new(Strategy::Static), 2);
        let mut poisoned = data.clone();
        poisoned.inputs.data_mut().fill(f32::NAN);
        match fit(m, &poisoned, &data, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step >= 1),
            other => panic!("{:?}", other.map(|r| r.1.len())),
        }
    }
}

//! Masked SGD-with-momentum and Adam, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientSet, Sequential};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd {
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            Optimizer::Sgd { momentum, weight_decay } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(format!("momentum must be in [0, 1), got {momentum}"));
                }
                if !(weight_decay >= 0.0) {
                    return Err(format!("weight_decay must be >= 0, got {weight_decay}"));
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(format!("adam betas must be in [0, 1), got {beta1}, {beta2}"));
                }
                if !(eps > 0.0) {
                    return Err(format!("adam eps must be positive, got {eps}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` each time a milestone (fraction of training) is passed.
    Step { milestones: Vec<f64>, factor: f64 },
    /// Linear warmup from 0 over `warmup_fraction` of training, then cosine
    /// decay to `min_fraction` of the base rate at the last step.
    CosineWarmup { warmup_fraction: f64, min_fraction: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            LrSchedule::Constant => Ok(()),
            LrSchedule::Step { milestones, factor } => {
                if milestones.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
                    return Err(format!("milestones must lie in (0, 1), got {milestones:?}"));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(format!("milestones must be strictly increasing, got {milestones:?}"));
                }
                if !(*factor > 0.0) {
                    return Err(format!("decay factor must be positive, got {factor}"));
                }
                Ok(())
            }
            LrSchedule::CosineWarmup {
                warmup_fraction,
                min_fraction,
            } => {
                if !(0.0..1.0).contains(warmup_fraction) {
                    return Err(format!("warmup_fraction must be in [0, 1), got {warmup_fraction}"));
                }
                if !(0.0..=1.0).contains(min_fraction) {
                    return Err(format!("min_fraction must be in [0, 1], got {min_fraction}"));
                }
                Ok(())
            }
        }
    }
}

/// Learning rate at step `t` of `total` (steps are 1-based when training;
/// `t = 0` is the state before the first update).
pub fn lr_at(t: usize, total: usize, base: f64, schedule: &LrSchedule) -> Result<f64> {
    if t > total {
        return invalid(format!("step {t} beyond horizon {total}"));
    }
    Ok(match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Step { milestones, factor } => {
            let passed = milestones
                .iter()
                .filter(|&&m| t as f64 >= m * total as f64)
                .count();
            base * factor.powi(passed as i32)
        }
        LrSchedule::CosineWarmup {
            warmup_fraction,
            min_fraction,
        } => {
            let warmup = (warmup_fraction * total as f64).round() as usize;
            if t < warmup {
                base * t as f64 / warmup as f64
            } else if total == warmup {
                base
            } else {
                let progress = (t - warmup) as f64 / (total - warmup) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                base * (min_fraction + (1.0 - min_fraction) * cos)
            }
        }
    })
}

/// Per-parameter optimizer slots: momentum buffer (SGD) or first/second
/// moments (Adam). Shaped like the parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Slots {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

impl Slots {
    fn new(len: usize, adam: bool) -> Self {
        Self {
            first: vec![0.0; len],
            second: if adam { vec![0.0; len] } else { Vec::new() },
        }
    }

    fn zero_at(&mut self, idx: usize) {
        self.first[idx] = 0.0;
        if let Some(v) = self.second.get_mut(idx) {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerState {
    pub weight: Option<Slots>,
    pub bias: Option<Slots>,
}

/// Optimizer state for one component (backbone or one head).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComponentState {
    pub layers: Vec<LayerState>,
    /// Number of optimizer steps taken (Adam bias correction).
    pub steps: u64,
}

impl ComponentState {
    pub fn new(net: &Sequential, opt: &Optimizer) -> Self {
        let adam = matches!(opt, Optimizer::Adam { .. });
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerState {
                    weight: l.weight.as_ref().map(|w| Slots::new(w.len(), adam)),
                    bias: l.bias.as_ref().map(|b| Slots::new(b.len(), adam)),
                })
                .collect(),
            steps: 0,
        }
    }

    /// Zero the weight slots of `layer` at `positions`.
    pub fn reset_positions(&mut self, layer: usize, positions: &[usize]) {
        if let Some(slots) = self.layers[layer].weight.as_mut() {
            for &p in positions {
                slots.zero_at(p);
            }
        }
    }

    /// Zero the weight slots wherever the corresponding mask is off.
    pub fn reset_masked(&mut self, net: &Sequential) {
        for (state, layer) in self.layers.iter_mut().zip(&net.layers) {
            if let (Some(slots), Some(w)) = (state.weight.as_mut(), &layer.weight) {
                for (i, &m) in w.mask().iter().enumerate() {
                    if !m {
                        slots.zero_at(i);
                    }
                }
            }
        }
    }

    /// True when every slot at a masked-out weight position is exactly 0.
    pub fn masked_slots_zero(&self, net: &Sequential) -> bool {
        self.layers.iter().zip(&net.layers).all(|(state, layer)| {
            match (&state.weight, &layer.weight) {
                (Some(slots), Some(w)) => w.mask().iter().enumerate().all(|(i, &m)| {
                    m || (slots.first[i].to_bits() == 0 && slots.second.get(i).is_none_or(|v| v.to_bits() == 0))
                }),
                _ => true,
            }
        })
    }
}

/// One masked optimizer step on `net`. Gradients at masked-out positions are
/// ignored and the mask is re-applied to both values and slots afterwards.
pub fn optimizer_step(
    net: &mut Sequential,
    grads: &GradientSet,
    state: &mut ComponentState,
    opt: &Optimizer,
    lr: f64,
) -> Result<()> {
    if grads.layers.len() != net.layers.len() || state.layers.len() != net.layers.len() {
        return Err(Error::Shape {
            context: "optimizer step layers".into(),
            expected: vec![net.layers.len()],
            got: vec![grads.layers.len(), state.layers.len()],
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients passed to optimizer".into()));
    }
    state.steps += 1;
    let t = state.steps;
    for ((layer, g), st) in net.layers.iter_mut().zip(&grads.layers).zip(&mut state.layers) {
        if let (Some(w), Some(gw), Some(slots)) = (layer.weight.as_mut(), &g.weight, st.weight.as_mut()) {
            let mask = w.mask().to_vec();
            w.update_values(|vals| apply(vals, gw.data(), Some(&mask), slots, opt, lr, t));
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    slots.zero_at(i);
                }
            }
        }
        if let (Some(b), Some(gb), Some(slots)) = (layer.bias.as_mut(), &g.bias, st.bias.as_mut()) {
            apply(b.data_mut(), gb.data(), None, slots, opt, lr, t);
        }
    }
    Ok(())
}

fn apply(vals: &mut [f32], grads: &[f32], mask: Option<&[bool]>, slots: &mut Slots, opt: &Optimizer, lr: f64, t: u64) {
    let active = |i: usize| mask.is_none_or(|m| m[i]);
    match *opt {
        Optimizer::Sgd { momentum, weight_decay } => {
            for i in 0..vals.len() {
                if !active(i) {
                    continue;
                }
                let g = grads[i] as f64 + weight_decay * vals[i] as f64;
                let v = momentum * slots.first[i] as f64 + g;
                slots.first[i] = v as f32;
                vals[i] = (vals[i] as f64 - lr * v) as f32;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(t as i32);
            let c2 = 1.0 - beta2.powi(t as i32);
            for i in 0..vals.len() {
                if !active(i) {
                    continue;
                }
                let g = grads[i] as f64;
                let m = beta1 * slots.first[i] as f64 + (1.0 - beta1) * g;
                let v = beta2 * slots.second[i] as f64 + (1.0 - beta2) * g * g;
                slots.first[i] = m as f32;
                slots.second[i] = v as f32;
                let step = lr * (m / c1) / ((v / c2).sqrt() + eps);
                vals[i] = (vals[i] as f64 - step) as f32;
            }
        }
    }
}

//! Layerwise sparsity allocation and mask initialization.
//!
//! A global sparsity `S` is turned into per-layer densities either uniformly
//! or with the Erdős–Rényi rule, where density is proportional to
//! `(fan_in + fan_out) / (fan_in * fan_out)` (plus kernel dims for ERK).
//! Real-valued densities are then rounded to integer active budgets whose
//! sum is exactly `round((1 - S) * total)`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::LayerSpec;
use crate::error::{invalid, Error, Result};
use crate::rng::{MaskSeed, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    Uniform,
    Er,
    Erk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    /// Position of the layer in the list passed to [`allocate`].
    pub layer: usize,
    pub size: usize,
    /// Real-valued density before integer rounding.
    pub density: f64,
    pub active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub sparsity: f64,
    pub mode: Allocation,
    pub layers: Vec<LayerBudget>,
    /// Attention-style projections would be exempt from masking. Always
    /// false for the linear/conv layers supported here.
    pub dense_projections: bool,
}

impl SparsityPlan {
    pub fn total_size(&self) -> usize {
        self.layers.iter().map(|l| l.size).sum()
    }

    pub fn total_active(&self) -> usize {
        self.layers.iter().map(|l| l.active).sum()
    }

    pub fn budget_for(&self, layer: usize) -> Option<&LayerBudget> {
        self.layers.iter().find(|b| b.layer == layer)
    }
}

/// `1 − active/total` of a mask.
pub fn sparsity_ratio(mask: &[bool]) -> Result<f64> {
    if mask.is_empty() {
        return invalid("sparsity of an empty mask");
    }
    let active = mask.iter().filter(|&&m| m).count();
    Ok(1.0 - active as f64 / mask.len() as f64)
}

/// Erdős–Rényi density factor of one layer.
pub fn er_factor(spec: &LayerSpec, mode: Allocation) -> f64 {
    match *spec {
        LayerSpec::Linear {
            in_features,
            out_features,
            ..
        } => (in_features + out_features) as f64 / (in_features * out_features) as f64,
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            let (n, k) = (in_channels as f64, out_channels as f64);
            if mode == Allocation::Erk {
                let (w, h) = (kernel_w as f64, kernel_h as f64);
                (n + k + w + h) / (n * k * w * h)
            } else {
                (n + k) / (n * k)
            }
        }
        LayerSpec::Relu => 0.0,
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Target active count for `total` weights at sparsity `s`.
pub fn global_budget(total: usize, s: f64) -> usize {
    round_half_up((1.0 - s) * total as f64)
}

/// Distribute global sparsity `s` over the maskable layers in `layers`.
pub fn allocate(layers: &[LayerSpec], s: f64, mode: Allocation) -> Result<SparsityPlan> {
    if !(0.0..1.0).contains(&s) {
        return invalid(format!("sparsity must be in [0, 1), got {s}"));
    }
    let maskable: Vec<(usize, &LayerSpec)> = layers.iter().enumerate().filter(|(_, l)| l.is_maskable()).collect();
    if maskable.is_empty() {
        return invalid("allocation needs at least one maskable layer");
    }
    let sizes: Vec<f64> = maskable.iter().map(|(_, l)| l.weight_count() as f64).collect();
    let total: f64 = sizes.iter().sum();
    let target = (1.0 - s) * total;

    let densities: Vec<f64> = match mode {
        Allocation::Uniform => vec![1.0 - s; maskable.len()],
        Allocation::Er | Allocation::Erk => {
            let factors: Vec<f64> = maskable.iter().map(|(_, l)| er_factor(l, mode)).collect();
            let mut dense = vec![false; maskable.len()];
            let mut eps;
            // Each pass pins at least one more layer or terminates.
            loop {
                let pinned: f64 = sizes.iter().zip(&dense).filter(|(_, &d)| d).map(|(s, _)| s).sum();
                let divisor: f64 = sizes
                    .iter()
                    .zip(&factors)
                    .zip(&dense)
                    .filter(|(_, &d)| !d)
                    .map(|((s, f), _)| s * f)
                    .sum();
                let rhs = target - pinned;
                if divisor == 0.0 {
                    if rhs.abs() > 1e-9 * total.max(1.0) {
                        return Err(Error::Infeasible(format!(
                            "all layers dense but {rhs} weights of budget remain"
                        )));
                    }
                    eps = 0.0;
                    break;
                }
                eps = rhs / divisor;
                let mut changed = false;
                for (d, f) in dense.iter_mut().zip(&factors) {
                    if !*d && eps * f >= 1.0 {
                        *d = true;
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            factors
                .iter()
                .zip(&dense)
                .map(|(f, &d)| if d { 1.0 } else { (eps * f).min(1.0) })
                .collect()
        }
    };

    let budget = global_budget(total as usize, s);
    let ideal: Vec<f64> = densities.iter().zip(&sizes).map(|(d, s)| d * s).collect();
    let actives = largest_remainder(&ideal, &sizes, budget)?;

    Ok(SparsityPlan {
        sparsity: s,
        mode,
        layers: maskable
            .iter()
            .zip(densities.iter().zip(actives))
            .map(|((idx, spec), (&density, active))| LayerBudget {
                layer: *idx,
                size: spec.weight_count(),
                density,
                active,
            })
            .collect(),
        dense_projections: false,
    })
}

/// Integer apportionment of `ideal` summing exactly to `budget`, never
/// exceeding `caps`. Ties go to the lower layer index.
fn largest_remainder(ideal: &[f64], caps: &[f64], budget: usize) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = ideal
        .iter()
        .zip(caps)
        .map(|(x, &c)| (x.floor().max(0.0) as usize).min(c as usize))
        .collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..ideal.len()).collect();
    let frac = |i: usize| ideal[i] - ideal[i].floor();
    if assigned <= budget {
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        let mut left = budget - assigned;
        while left > 0 {
            let before = left;
            for &i in &order {
                if left == 0 {
                    break;
                }
                if out[i] < caps[i] as usize {
                    out[i] += 1;
                    left -= 1;
                }
            }
            if before == left {
                return Err(Error::Infeasible(format!("{left} active weights exceed layer capacity")));
            }
        }
    } else {
        order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(a.cmp(&b)));
        let mut extra = assigned - budget;
        while extra > 0 {
            for &i in &order {
                if extra == 0 {
                    break;
                }
                if out[i] > 0 {
                    out[i] -= 1;
                    extra -= 1;
                }
            }
        }
    }
    Ok(out)
}

/// A mask with exactly `active` of `size` positions on, drawn uniformly
/// without replacement from the seeded stream.
pub fn random_mask(size: usize, active: usize, seed: MaskSeed) -> Result<Vec<bool>> {
    if active > size {
        return invalid(format!("budget {active} exceeds layer size {size}"));
    }
    let mut mask = vec![false; size];
    if active == size {
        mask.fill(true);
        return Ok(mask);
    }
    let mut rng = seed.rng(Purpose::MaskInit);
    for i in index::sample(&mut rng, size, active) {
        mask[i] = true;
    }
    Ok(mask)
}

/// One mask per layer budget in `plan`, each from its own stream
/// `(component, layer)`.
pub fn init_masks(plan: &SparsityPlan, seed: u64, component: u64) -> Result<Vec<Vec<bool>>> {
    plan.layers
        .iter()
        .map(|b| random_mask(b.size, b.active, MaskSeed::new(seed, component, b.layer as u64)))
        .collect()
}

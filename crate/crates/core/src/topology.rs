//! Mask evolution: drop-fraction schedule, prune/grow selection and the
//! in-place topology update applied to one component every `ΔT` steps.

use rand::seq::index;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientSet, Sequential};
use crate::error::{invalid, Error, Result};
use crate::optim::ComponentState;
use crate::rng::{stream, Purpose, StreamRng};
use crate::sparsity::global_budget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Masks fixed at initialization.
    Static,
    /// Dense training, one global magnitude prune, then frozen masks.
    PruneOneshot,
    /// Magnitude prune, uniform random regrowth.
    Set,
    /// Magnitude prune, regrowth by largest dense-gradient magnitude.
    Rigl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PruneMethod {
    Magnitude,
    SoftMagnitude {
        temperature: f64,
        #[serde(default = "default_true")]
        normalize_by_mean: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowMethod {
    Random,
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySchedule {
    pub strategy: Strategy,
    #[serde(default = "magnitude")]
    pub prune_method: PruneMethod,
    /// Steps between updates (ΔT).
    #[serde(default = "default_interval")]
    pub update_interval: usize,
    /// Drop fraction at t = 0 (p₀).
    #[serde(default = "default_p0")]
    pub initial_drop_fraction: f64,
    /// Final fraction of training without topology updates.
    #[serde(default)]
    pub stop_fraction: f64,
    /// Fraction of training after which `prune_oneshot` prunes.
    #[serde(default = "default_prune_at")]
    pub prune_at_fraction: f64,
}

fn magnitude() -> PruneMethod {
    PruneMethod::Magnitude
}
fn default_interval() -> usize {
    100
}
fn default_p0() -> f64 {
    0.5
}
fn default_prune_at() -> f64 {
    0.5
}

impl TopologySchedule {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            prune_method: PruneMethod::Magnitude,
            update_interval: default_interval(),
            initial_drop_fraction: default_p0(),
            stop_fraction: 0.0,
            prune_at_fraction: default_prune_at(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.update_interval < 1 {
            return Err(("update_interval", "must be >= 1".into()));
        }
        if !(self.initial_drop_fraction > 0.0 && self.initial_drop_fraction <= 1.0) {
            return Err((
                "initial_drop_fraction",
                format!("must be in (0, 1], got {}", self.initial_drop_fraction),
            ));
        }
        if !(0.0..1.0).contains(&self.stop_fraction) {
            return Err(("stop_fraction", format!("must be in [0, 1), got {}", self.stop_fraction)));
        }
        if !(self.prune_at_fraction > 0.0 && self.prune_at_fraction < 1.0) {
            return Err((
                "prune_at_fraction",
                format!("must be in (0, 1), got {}", self.prune_at_fraction),
            ));
        }
        if let PruneMethod::SoftMagnitude { temperature, .. } = self.prune_method {
            if !(temperature > 0.0) {
                return Err(("prune_method.temperature", format!("must be > 0, got {temperature}")));
            }
        }
        Ok(())
    }

    pub fn grow_method(&self) -> Option<GrowMethod> {
        match self.strategy {
            Strategy::Set => Some(GrowMethod::Random),
            Strategy::Rigl => Some(GrowMethod::Gradient),
            Strategy::Static | Strategy::PruneOneshot => None,
        }
    }

    /// Whether step `t` (1-based) of a `horizon`-step run performs a mask update.
    pub fn is_update_step(&self, t: usize, horizon: usize) -> bool {
        self.grow_method().is_some()
            && t % self.update_interval == 0
            && t < horizon
            && (t as f64) <= (1.0 - self.stop_fraction) * horizon as f64
    }

    /// The step after which `prune_oneshot` prunes.
    pub fn prune_step(&self, horizon: usize) -> Option<usize> {
        (self.strategy == Strategy::PruneOneshot)
            .then(|| ((self.prune_at_fraction * horizon as f64).round() as usize).clamp(1, horizon))
    }
}

/// Cosine-annealed drop fraction `p₀·(1 + cos(πt/T))/2`.
pub fn drop_fraction(t: usize, horizon: usize, p0: f64) -> Result<f64> {
    if t > horizon || horizon == 0 {
        return invalid(format!("step {t} outside horizon {horizon}"));
    }
    Ok(p0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / horizon as f64).cos()))
}

/// Uniform draw from the open interval (0, 1).
fn open_unit(rng: &mut StreamRng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Indices of the `k` largest `keys`, ties to the lower index. Sorted ascending.
fn top_k(candidates: &[usize], keys: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(candidates[a].cmp(&candidates[b])));
    let mut out: Vec<usize> = order[..k].iter().map(|&i| candidates[i]).collect();
    out.sort_unstable();
    out
}

/// Choose `k` active positions of `weights` to prune. Result sorted ascending.
pub fn select_prune(
    weights: &[f32],
    mask: &[bool],
    k: usize,
    method: PruneMethod,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let active: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if k > active.len() {
        return invalid(format!("cannot prune {k} of {} active weights", active.len()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mags: Vec<f64> = active.iter().map(|&i| (weights[i] as f64).abs()).collect();
    let keys: Vec<f64> = match method {
        // Smallest magnitude first: negate so top-k picks them.
        PruneMethod::Magnitude => mags.iter().map(|m| -m).collect(),
        PruneMethod::SoftMagnitude {
            temperature,
            normalize_by_mean,
        } => {
            let mean = mags.iter().sum::<f64>() / mags.len() as f64;
            let scale = if normalize_by_mean { temperature * mean } else { temperature };
            // Gumbel-top-k over log-weights −|θ|/(τ·μ) samples without
            // replacement with probability ∝ exp(−|θ|/(τ·μ)).
            mags.iter()
                .map(|m| {
                    let logit = if scale > 0.0 { -m / scale } else { 0.0 };
                    logit - (-open_unit(rng).ln()).ln()
                })
                .collect()
        }
    };
    Ok(top_k(&active, &keys, k))
}

/// Choose `k` inactive positions of `mask` to regrow. Result sorted ascending.
pub fn select_grow(
    mask: &[bool],
    k: usize,
    method: GrowMethod,
    dense_grads: Option<&[f32]>,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let inactive: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    if k > inactive.len() {
        return invalid(format!("cannot grow {k} of {} inactive positions", inactive.len()));
    }
    match method {
        GrowMethod::Random => {
            if k == 0 {
                return Ok(Vec::new());
            }
            let mut out: Vec<usize> = index::sample(rng, inactive.len(), k)
                .into_iter()
                .map(|i| inactive[i])
                .collect();
            out.sort_unstable();
            Ok(out)
        }
        GrowMethod::Gradient => {
            let grads = dense_grads.ok_or_else(|| {
                Error::InvalidArgument("gradient growth requires dense gradients".into())
            })?;
            if grads.len() != mask.len() {
                return Err(Error::Shape {
                    context: "dense gradient for growth".into(),
                    expected: vec![mask.len()],
                    got: vec![grads.len()],
                });
            }
            let keys: Vec<f64> = inactive.iter().map(|&i| (grads[i] as f64).abs()).collect();
            Ok(top_k(&inactive, &keys, k))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerUpdate {
    pub layer: usize,
    pub pruned: Vec<usize>,
    pub grown: Vec<usize>,
    pub active_before: usize,
    pub active_after: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub component: String,
    pub drop_fraction: f64,
    pub layers: Vec<LayerUpdate>,
}

/// Where the random decisions of an update come from.
#[derive(Debug, Clone, Copy)]
pub struct UpdateStreams {
    pub seed: u64,
    pub component: u64,
}

/// Prune then regrow `round(p(t)·active)` weights in every maskable layer of
/// one component. Grown weights start at 0; optimizer slots at pruned and
/// grown positions are zeroed.
#[allow(clippy::too_many_arguments)]
pub fn topology_update(
    net: &mut Sequential,
    state: &mut ComponentState,
    dense_grads: Option<&GradientSet>,
    schedule: &TopologySchedule,
    t: usize,
    horizon: usize,
    streams: UpdateStreams,
    label: &str,
) -> Result<UpdateRecord> {
    let Some(grow) = schedule.grow_method() else {
        return invalid(format!("strategy {:?} does not update topology", schedule.strategy));
    };
    if t % schedule.update_interval != 0 {
        return invalid(format!(
            "topology update at step {t} is off schedule (interval {})",
            schedule.update_interval
        ));
    }
    if grow == GrowMethod::Gradient && !dense_grads.is_some_and(|g| g.dense) {
        return invalid("gradient growth requires dense gradients");
    }
    let p = drop_fraction(t, horizon, schedule.initial_drop_fraction)?;
    let mut record = UpdateRecord {
        step: t,
        component: label.to_string(),
        drop_fraction: p,
        layers: Vec::new(),
    };
    for li in net.maskable_indices() {
        let w = net.layers[li].weight.as_mut().expect("maskable layer weight");
        let before = w.active_count();
        let k = (p * before as f64 + 0.5).floor() as usize;
        if k == 0 {
            record.layers.push(LayerUpdate {
                layer: li,
                pruned: Vec::new(),
                grown: Vec::new(),
                active_before: before,
                active_after: before,
            });
            continue;
        }
        let mut rng = stream(
            streams.seed,
            &[Purpose::Topology as u64, streams.component, li as u64, t as u64],
        );
        let pruned = select_prune(w.data(), w.mask(), k, schedule.prune_method, &mut rng)?;
        for &i in &pruned {
            w.set_active(i, false, 0.0);
        }
        let inactive = w.len() - w.active_count();
        let layer_grads = dense_grads.and_then(|g| g.layers[li].weight.as_ref()).map(|g| g.data());
        let grown = select_grow(w.mask(), k.min(inactive), grow, layer_grads, &mut rng)?;
        for &i in &grown {
            w.set_active(i, true, 0.0);
        }
        let after = w.active_count();
        state.reset_positions(li, &pruned);
        state.reset_positions(li, &grown);
        record.layers.push(LayerUpdate {
            layer: li,
            pruned,
            grown,
            active_before: before,
            active_after: after,
        });
    }
    Ok(record)
}

/// Global magnitude pruning over every maskable weight of `nets`, keeping
/// exactly `round((1−S)·total)` of them. Ties keep the earlier
/// (component, layer, position). Returns the number of kept weights.
pub fn one_shot_global_prune(nets: &mut [&mut Sequential], s: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&s) {
        return invalid(format!("target sparsity must be in [0, 1), got {s}"));
    }
    let mut entries: Vec<(f32, usize, usize, usize)> = Vec::new();
    for (ci, net) in nets.iter().enumerate() {
        for li in net.maskable_indices() {
            let w = net.layers[li].weight.as_ref().expect("maskable weight");
            entries.extend(w.data().iter().enumerate().map(|(i, v)| (v.abs(), ci, li, i)));
        }
    }
    let keep = global_budget(entries.len(), s);
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    let kept: std::collections::HashSet<(usize, usize, usize)> =
        entries[..keep].iter().map(|&(_, c, l, i)| (c, l, i)).collect();
    for (ci, net) in nets.iter_mut().enumerate() {
        for li in net.maskable_indices() {
            let w = net.layers[li].weight.as_mut().expect("maskable weight");
            let mask = (0..w.len()).map(|i| kept.contains(&(ci, li, i))).collect();
            w.set_mask(mask)?;
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Layer, LayerSpec};
    use crate::optim::Optimizer;
    use crate::tensor::{MaskedTensor, Tensor};

    fn rng() -> StreamRng {
        stream(11, &[1])
    }

    #[test]
    fn drop_fraction_endpoints() {
        assert_eq!(drop_fraction(0, 100, 0.5).unwrap(), 0.5);
        assert!(drop_fraction(100, 100, 0.5).unwrap().abs() < 1e-16);
        assert!((drop_fraction(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(drop_fraction(101, 100, 0.5).is_err());
    }

    #[test]
    fn magnitude_prune_hand_case() {
        let w = [0.5, -0.1, 0.3, -0.7];
        let got = select_prune(&w, &[true; 4], 2, PruneMethod::Magnitude, &mut rng()).unwrap();
        assert_eq!(got, vec![1, 2]);
        assert!(select_prune(&w, &[true; 4], 0, PruneMethod::Magnitude, &mut rng()).unwrap().is_empty());
        assert!(select_prune(&w, &[true, false, false, false], 2, PruneMethod::Magnitude, &mut rng()).is_err());
    }

    #[test]
    fn soft_prune_cold_limit() {
        let w = [0.5, -0.1, 0.3, -0.7];
        let m = PruneMethod::SoftMagnitude {
            temperature: 1e-6,
            normalize_by_mean: true,
        };
        for seed in 0..20 {
            let got = select_prune(&w, &[true; 4], 2, m, &mut stream(seed, &[])).unwrap();
            assert_eq!(got, vec![1, 2]);
        }
    }

    #[test]
    fn soft_prune_prefers_small_weights() {
        // At τ = 3 (normalized) small weights are still pruned more often.
        let w: Vec<f32> = (0..10).map(|i| 0.1 * (i + 1) as f32).collect();
        let m = PruneMethod::SoftMagnitude {
            temperature: 3.0,
            normalize_by_mean: true,
        };
        let mut counts = [0usize; 10];
        for seed in 0..2000 {
            for i in select_prune(&w, &[true; 10], 1, m, &mut stream(seed, &[])).unwrap() {
                counts[i] += 1;
            }
        }
        assert!(counts[0] > counts[9], "{counts:?}");
    }

    #[test]
    fn gradient_grow_hand_case() {
        let mask = [true, false, true, false, false];
        let g = [9.0, 0.2, 5.0, -0.9, 0.4];
        let got = select_grow(&mask, 1, GrowMethod::Gradient, Some(&g), &mut rng()).unwrap();
        assert_eq!(got, vec![3]);
        assert!(select_grow(&mask, 1, GrowMethod::Gradient, None, &mut rng()).is_err());
        assert!(select_grow(&mask, 4, GrowMethod::Random, None, &mut rng()).is_err());
    }

    #[test]
    fn random_grow_exhausts() {
        let mask = [true, false, true, false, false];
        let got = select_grow(&mask, 3, GrowMethod::Random, None, &mut rng()).unwrap();
        assert_eq!(got, vec![1, 3, 4]);
        assert!(select_grow(&mask, 0, GrowMethod::Random, None, &mut rng()).unwrap().is_empty());
    }

    fn toy(values: Vec<f32>, mask: Vec<bool>) -> Sequential {
        let n = values.len();
        let wt = MaskedTensor::new(Tensor::new(vec![1, n], values).unwrap(), mask).unwrap();
        let spec = LayerSpec::Linear {
            in_features: n,
            out_features: 1,
            bias: false,
        };
        Sequential::new(vec![Layer::with_params(spec, Some(wt), None).unwrap()])
    }

    fn sgd() -> Optimizer {
        Optimizer::Sgd {
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn update_prunes_half_and_regrows() {
        let vals: Vec<f32> = (0..20).map(|i| (i as f32 - 9.5) * 0.1).collect();
        let mask: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let mut net = toy(vals, mask);
        let mut st = ComponentState::new(&net, &sgd());
        let mut sched = TopologySchedule::new(Strategy::Set);
        sched.update_interval = 10;
        sched.initial_drop_fraction = 0.5;
        let streams = UpdateStreams { seed: 3, component: 0 };
        // t = 0 gives p = p₀ = 0.5, so 5 of the 10 active weights move.
        let rec = topology_update(&mut net, &mut st, None, &sched, 0, 100, streams, "backbone").unwrap();
        let l = &rec.layers[0];
        assert_eq!(l.pruned.len(), 5);
        assert_eq!(l.grown.len(), 5);
        assert_eq!(l.active_before, 10);
        assert_eq!(l.active_after, 10);
        // |θ| at even positions: 10 → 0.05, 8 → 0.15, 12 → 0.25, 6 → 0.35, 14 → 0.45.
        assert_eq!(l.pruned, vec![6, 8, 10, 12, 14]);
        let w = net.layers[0].weight.as_ref().unwrap();
        for &g in &l.grown {
            assert_eq!(w.data()[g], 0.0);
            assert!(w.mask()[g]);
        }
        assert!(w.invariant_holds());
    }

    #[test]
    fn update_zero_drop_is_identity() {
        let mut net = toy(vec![0.1, 0.2, 0.3, 0.4], vec![true, true, false, false]);
        let before = net.clone();
        let mut st = ComponentState::new(&net, &sgd());
        let mut sched = TopologySchedule::new(Strategy::Set);
        sched.update_interval = 5;
        let rec = topology_update(&mut net, &mut st, None, &sched, 10, 10, UpdateStreams { seed: 1, component: 0 }, "b")
            .unwrap();
        assert!(rec.layers[0].pruned.is_empty() && rec.layers[0].grown.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn update_rejects_off_schedule_and_static() {
        let mut net = toy(vec![0.1, 0.2], vec![true, false]);
        let mut st = ComponentState::new(&net, &sgd());
        let mut sched = TopologySchedule::new(Strategy::Set);
        sched.update_interval = 5;
        let s = UpdateStreams { seed: 1, component: 0 };
        assert!(topology_update(&mut net, &mut st, None, &sched, 7, 10, s, "b").is_err());
        sched.strategy = Strategy::Static;
        assert!(topology_update(&mut net, &mut st, None, &sched, 5, 10, s, "b").is_err());
        sched.strategy = Strategy::Rigl;
        assert!(topology_update(&mut net, &mut st, None, &sched, 5, 10, s, "b").is_err());
    }

    #[test]
    fn set_update_reproducible() {
        let run = || {
            let vals: Vec<f32> = (0..30).map(|i| ((i * 7) % 13) as f32 * 0.1 + 0.01 * i as f32).collect();
            let mask: Vec<bool> = (0..30).map(|i| i % 3 != 0).collect();
            let mut net = toy(vals, mask);
            let mut st = ComponentState::new(&net, &sgd());
            let sched = TopologySchedule::new(Strategy::Set);
            topology_update(&mut net, &mut st, None, &sched, 100, 1000, UpdateStreams { seed: 5, component: 2 }, "h")
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn global_prune_examples() {
        let mut a = toy(vec![1., 2., 3.], vec![true; 3]);
        let mut b = toy(vec![4., 5., 6.], vec![true; 3]);
        assert_eq!(one_shot_global_prune(&mut [&mut a, &mut b], 0.5).unwrap(), 3);
        assert_eq!(a.layers[0].weight.as_ref().unwrap().mask(), &[false; 3]);
        assert_eq!(b.layers[0].weight.as_ref().unwrap().mask(), &[true; 3]);

        let mut c = toy(vec![1., -9., 3.], vec![true; 3]);
        one_shot_global_prune(&mut [&mut c], 0.0).unwrap();
        assert_eq!(c.layers[0].weight.as_ref().unwrap().mask(), &[true; 3]);
        // budget 1 of 3: round(0.34 * 3) = 1
        one_shot_global_prune(&mut [&mut c], 0.66).unwrap();
        assert_eq!(c.layers[0].weight.as_ref().unwrap().mask(), &[false, true, false]);
        assert!(one_shot_global_prune(&mut [&mut c], 1.0).is_err());
    }
}

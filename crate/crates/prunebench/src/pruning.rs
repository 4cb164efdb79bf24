//! The nine pruning methods (structure x criterion x scope) and the
//! iterative halving schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Layer, MaskedNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    Unstructured,
    Kernel,
    Filter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Magnitude,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Local,
    Global,
}

/// One of the nine supported method combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PruningMethod {
    pub structure: Structure,
    pub criterion: Criterion,
    pub scope: Scope,
}

impl PruningMethod {
    pub fn new(structure: Structure, criterion: Criterion, scope: Scope) -> Result<Self> {
        let m = PruningMethod {
            structure,
            criterion,
            scope,
        };
        m.validate()?;
        Ok(m)
    }

    /// Global random pruning is rejected: it converges to the same masks as
    /// local random pruning.
    pub fn validate(&self) -> Result<()> {
        if self.criterion == Criterion::Random && self.scope == Scope::Global {
            return Err(Error::Contract(
                "global random pruning is not a supported method".into(),
            ));
        }
        Ok(())
    }

    /// All nine valid combinations in a stable order.
    pub fn all() -> Vec<PruningMethod> {
        let mut out = Vec::new();
        for structure in [Structure::Unstructured, Structure::Kernel, Structure::Filter] {
            for (criterion, scope) in [
                (Criterion::Magnitude, Scope::Local),
                (Criterion::Magnitude, Scope::Global),
                (Criterion::Random, Scope::Local),
            ] {
                out.push(PruningMethod {
                    structure,
                    criterion,
                    scope,
                });
            }
        }
        out
    }

    pub fn structure_name(&self) -> &'static str {
        match self.structure {
            Structure::Unstructured => "unstructured",
            Structure::Kernel => "kernel",
            Structure::Filter => "filter",
        }
    }

    pub fn criterion_name(&self) -> &'static str {
        match self.criterion {
            Criterion::Magnitude => "magnitude",
            Criterion::Random => "random",
        }
    }

    pub fn scope_name(&self) -> &'static str {
        match self.scope {
            Scope::Local => "local",
            Scope::Global => "global",
        }
    }

    pub fn label(&self) -> String {
        format!(
            "{}_{}_{}",
            self.structure_name(),
            self.criterion_name(),
            self.scope_name()
        )
    }
}

/// One prunable unit: a single weight, a kernel slice, or a whole filter.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneUnit {
    pub layer: usize,
    pub unit: usize,
    pub score: f64,
}

/// Does the method prune this layer at all?
fn layer_in_scope(layer: &Layer, structure: Structure) -> bool {
    match structure {
        Structure::Unstructured => true,
        Structure::Kernel | Structure::Filter => layer.is_conv(),
    }
}

/// Number of units the structure divides a layer's weights into.
pub fn unit_count(layer: &Layer, structure: Structure) -> usize {
    let shape = layer.weights.values.shape();
    match structure {
        Structure::Unstructured => layer.weights.values.len(),
        // conv kernels are [kh, kw, cin, cout]
        Structure::Kernel => shape[2] * shape[3],
        Structure::Filter => shape[3],
    }
}

/// Flat weight indices belonging to one unit.
pub fn unit_indices(layer: &Layer, structure: Structure, unit: usize) -> Vec<usize> {
    let shape = layer.weights.values.shape();
    match structure {
        Structure::Unstructured => vec![unit],
        Structure::Kernel => {
            let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
            let (ci, co) = (unit / cout, unit % cout);
            let mut idx = Vec::with_capacity(kh * kw);
            for ky in 0..kh {
                for kx in 0..kw {
                    idx.push(((ky * kw + kx) * cin + ci) * cout + co);
                }
            }
            idx
        }
        Structure::Filter => {
            let (kh, kw, cin, cout) = (shape[0], shape[1], shape[2], shape[3]);
            let co = unit;
            let mut idx = Vec::with_capacity(kh * kw * cin);
            for ky in 0..kh {
                for kx in 0..kw {
                    for ci in 0..cin {
                        idx.push(((ky * kw + kx) * cin + ci) * cout + co);
                    }
                }
            }
            idx
        }
    }
}

fn unit_is_unpruned(layer: &Layer, structure: Structure, unit: usize) -> bool {
    unit_indices(layer, structure, unit)
        .iter()
        .all(|&i| layer.weights.mask.data()[i] != 0.0)
}

/// Score every still-unpruned unit. Magnitude scores are the L2 norm of the
/// unit's effective weights; random scores are seeded uniform draws.
pub fn score_units(net: &MaskedNetwork, method: &PruningMethod, seed: u64) -> Result<Vec<PruneUnit>> {
    method.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        if !layer_in_scope(layer, method.structure) {
            continue;
        }
        let count = unit_count(layer, method.structure);
        for unit in 0..count {
            // draw before the pruned check so random scores stay aligned
            // with the unit enumeration across schedule steps
            let draw: f64 = rng.gen();
            if !unit_is_unpruned(layer, method.structure, unit) {
                continue;
            }
            let score = match method.criterion {
                Criterion::Magnitude => unit_indices(layer, method.structure, unit)
                    .iter()
                    .map(|&i| {
                        let v = layer.weights.values.data()[i] * layer.weights.mask.data()[i];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt(),
                Criterion::Random => draw,
            };
            out.push(PruneUnit {
                layer: li,
                unit,
                score,
            });
        }
    }
    Ok(out)
}

/// Walk `order` (ascending score) removing units until the removed weight
/// count reaches `target_weights` under a nearest-count rule: the crossing
/// unit is removed only when that lands closer to the target than stopping
/// short, so the final deviation is at most half a unit. `protected` units
/// are always kept (last-unit protection).
fn take_until_weight_target<'a>(
    order: &[&'a PruneUnit],
    sizes: &dyn Fn(&PruneUnit) -> usize,
    target_weights: f64,
    protected: usize,
) -> Vec<&'a PruneUnit> {
    let mut taken = Vec::new();
    let mut removed = 0.0;
    let mut left = order.len();
    for u in order {
        if left <= protected {
            break;
        }
        let s = sizes(u) as f64;
        if removed + s / 2.0 >= target_weights {
            break;
        }
        taken.push(*u);
        removed += s;
        left -= 1;
    }
    taken
}

/// Remove the lowest-scoring units until a `fraction` of the remaining
/// *weights* is gone (to within half a removal unit), per layer for local
/// scope or pooled across layers for global scope. Returns the number of
/// units actually removed.
pub fn prune_step(
    net: &mut MaskedNetwork,
    method: &PruningMethod,
    fraction: f64,
    seed: u64,
) -> Result<usize> {
    method.validate()?;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!(
            "prune fraction must be in (0,1), got {}",
            fraction
        )));
    }
    let units = score_units(net, method, seed)?;
    if units.len() < 2 {
        return Err(Error::ScheduleExhausted(format!(
            "only {} unpruned unit(s) remain",
            units.len()
        )));
    }
    let size = |u: &PruneUnit| unit_indices(&net.layers[u.layer], method.structure, u.unit).len();

    let mut to_remove: Vec<(usize, usize)> = Vec::new();
    match method.scope {
        Scope::Global => {
            // one pooled ranking; a layer may lose its final unit here, only
            // the network-wide last unit is protected
            let mut order: Vec<&PruneUnit> = units.iter().collect();
            order.sort_by(|a, b| {
                a.score
                    .partial_cmp(&b.score)
                    .unwrap()
                    .then(a.layer.cmp(&b.layer))
                    .then(a.unit.cmp(&b.unit))
            });
            let total_w: usize = units.iter().map(&size).sum();
            let target = fraction * total_w as f64;
            to_remove.extend(
                take_until_weight_target(&order, &size, target, 1)
                    .into_iter()
                    .map(|u| (u.layer, u.unit)),
            );
        }
        Scope::Local => {
            let mut per_layer: Vec<(usize, Vec<&PruneUnit>)> = Vec::new();
            for u in &units {
                match per_layer.last_mut() {
                    Some((l, v)) if *l == u.layer => v.push(u),
                    _ => per_layer.push((u.layer, vec![u])),
                }
            }
            for (_, layer_units) in &per_layer {
                let mut order: Vec<&PruneUnit> = layer_units.iter().copied().collect();
                order.sort_by(|a, b| {
                    a.score
                        .partial_cmp(&b.score)
                        .unwrap()
                        .then(a.unit.cmp(&b.unit))
                });
                let layer_w: usize = layer_units.iter().map(|u| size(u)).sum();
                let quota = fraction * layer_w as f64;
                to_remove.extend(
                    take_until_weight_target(&order, &size, quota, 1)
                        .into_iter()
                        .map(|u| (u.layer, u.unit)),
                );
            }
        }
    }

    if to_remove.is_empty() {
        return Err(Error::ScheduleExhausted(
            "last-unit protection blocked every candidate".into(),
        ));
    }
    let removed = to_remove.len();
    for (li, unit) in to_remove {
        let structure = method.structure;
        let idx = unit_indices(&net.layers[li], structure, unit);
        let mask = net.layers[li].weights.mask.data_mut();
        for i in idx {
            mask[i] = 0.0;
        }
    }
    Ok(removed)
}

/// Mark which parameters count as prunable for the given method: all weight
/// matrices for unstructured pruning, conv kernels only for structured
/// pruning. Biases are never prunable.
pub fn set_prunable_flags(net: &mut MaskedNetwork, method: &PruningMethod) {
    let structured = method.structure != Structure::Unstructured;
    for layer in net.layers.iter_mut() {
        let conv = matches!(layer.kind, crate::model::LayerKind::Conv { .. });
        layer.weights.prunable = !structured || conv;
        layer.bias.prunable = false;
    }
}

/// Iteratively halve the remaining units, fine-tuning after each step, and
/// checkpoint the network at every requested compression rate.
///
/// When last-unit protection saturates the schedule early, the remaining
/// rates are recorded at the saturated state instead of erroring.
pub fn iterative_prune(
    net: &mut MaskedNetwork,
    method: &PruningMethod,
    rates: &[usize],
    trainer: &mut dyn FnMut(&mut MaskedNetwork) -> Result<()>,
    seed: u64,
) -> Result<Vec<(usize, MaskedNetwork)>> {
    method.validate()?;
    if rates.is_empty() {
        return Err(Error::Contract("empty rate schedule".into()));
    }
    let increasing = rates.windows(2).all(|w| w[0] < w[1]);
    if !increasing || rates.iter().any(|&r| r < 2 || !r.is_power_of_two()) {
        return Err(Error::Contract(format!(
            "rates must be strictly increasing powers of two >= 2, got {:?}",
            rates
        )));
    }
    set_prunable_flags(net, method);
    let total = net.sparsity().total;
    let mut checkpoints = Vec::with_capacity(rates.len());
    let mut current_rate = 1usize;
    let mut step = 0u64;
    let mut saturated = false;
    for &rate in rates {
        while current_rate < rate && !saturated {
            let next_rate = current_rate * 2;
            // aim each halving step at the absolute per-rate weight count so
            // rounding never compounds across the schedule
            let desired = total as f64 / next_rate as f64;
            let remaining = net.sparsity().nonzero as f64;
            let fraction = 1.0 - desired / remaining;
            if fraction > 0.0 {
                match prune_step(net, method, fraction, seed.wrapping_add(step)) {
                    Ok(_) => {
                        trainer(net)?;
                    }
                    Err(Error::ScheduleExhausted(_)) => {
                        saturated = true;
                    }
                    Err(e) => return Err(e),
                }
            }
            step += 1;
            current_rate = next_rate;
        }
        current_rate = rate;
        checkpoints.push((rate, net.clone()));
    }
    Ok(checkpoints)
}

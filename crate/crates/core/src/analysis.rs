//! Post-training probes driven by learned neuron importance Ω: ranking,
//! ablation sweeps, per-class collapse, connection importance with one-shot
//! pruning, and weight-perturbation robustness.
//!
//! All probes work on copies or evaluation-time masks; the model passed in is
//! never modified.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Samples;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::layer_outputs;
use crate::nn::{evaluate, evaluate_ablated, Evaluation, MlpModel};
use crate::rng::Rng;

/// Units of one hidden layer ordered by Ω, most important first; ties keep
/// ascending index order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NeuronRanking {
    pub layer: usize,
    pub order: Vec<usize>,
}

pub fn rank_neurons(layer: usize, omega: &[f64]) -> NeuronRanking {
    let mut order: Vec<usize> = (0..omega.len()).collect();
    order.sort_by(|&a, &b| omega[b].total_cmp(&omega[a]).then(a.cmp(&b)));
    NeuronRanking { layer, order }
}

/// Ranking of a gated hidden layer from its measured Ω.
pub fn rank_layer(model: &MlpModel, layer: usize) -> Result<NeuronRanking> {
    let gate = model
        .gate(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("hidden layer {layer} has no forgetting gate")))?;
    if gate.omega_count() == 0 {
        return Err(Error::InvalidArgument(format!(
            "importance of hidden layer {layer} has not been measured"
        )));
    }
    Ok(rank_neurons(layer, gate.omega()))
}

fn removal_mask(width: usize, neurons: &[usize]) -> Result<Vec<bool>> {
    let mut removed = vec![false; width];
    for &n in neurons {
        if n >= width {
            return Err(Error::InvalidArgument(format!(
                "neuron {n} out of range for layer of width {width}"
            )));
        }
        removed[n] = true;
    }
    Ok(removed)
}

/// Accuracy with the given units of hidden layer `layer` silenced.
pub fn ablate(model: &MlpModel, data: &dyn Samples, layer: usize, neurons: &[usize]) -> Result<Evaluation> {
    if layer >= model.num_hidden() {
        return Err(Error::InvalidArgument(format!("hidden layer {layer} out of range")));
    }
    let removed = removal_mask(model.hidden_width(layer), neurons)?;
    evaluate_ablated(model, data, layer, &removed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationOrder {
    /// Remove the least important units first.
    Positive,
    /// Remove the most important units first.
    Negative,
    /// Remove uniformly random units.
    Random,
}

impl AblationOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationOrder::Positive => "positive",
            AblationOrder::Negative => "negative",
            AblationOrder::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: AblationOrder,
    pub fraction: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub layer: usize,
}

/// Number of units removed for an ablated fraction.
pub fn removal_count(fraction: f64, width: usize) -> usize {
    ((fraction * width as f64).round() as usize).min(width)
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::InvalidArgument(format!("fraction {f} outside [0, 1]")));
    }
    Ok(())
}

/// Accuracy after removing growing fractions of one layer's units in the
/// given order. Random order repeats `repeats` times per fraction.
pub fn ablation_sweep(
    model: &MlpModel,
    data: &dyn Samples,
    ranking: &NeuronRanking,
    mode: AblationOrder,
    fractions: &[f64],
    repeats: usize,
    rng: &mut Rng,
) -> Result<Vec<AblationRow>> {
    let layer = ranking.layer;
    let width = model.hidden_width(layer);
    if ranking.order.len() != width {
        return Err(Error::InvalidArgument("ranking does not match layer width".into()));
    }
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        check_fraction(f)?;
        let k = removal_count(f, width);
        let accs: Vec<f64> = match mode {
            AblationOrder::Positive => {
                vec![ablate(model, data, layer, &ranking.order[width - k..])?.accuracy]
            }
            AblationOrder::Negative => vec![ablate(model, data, layer, &ranking.order[..k])?.accuracy],
            AblationOrder::Random => (0..repeats.max(1))
                .map(|_| ablate(model, data, layer, &rng.sample_indices(width, k)).map(|e| e.accuracy))
                .collect::<Result<_>>()?,
        };
        let (accuracy_mean, accuracy_std) = mean_std(&accs);
        rows.push(AblationRow {
            mode,
            fraction: f,
            accuracy_mean,
            accuracy_std,
            layer,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAccuracyRow {
    pub class: usize,
    pub accuracy: f64,
    pub topk_removed: usize,
}

/// Per-class accuracy after removing the `k` most important units of a
/// layer, for each `k` in `ks`.
pub fn topk_class_collapse(
    model: &MlpModel,
    data: &dyn Samples,
    ranking: &NeuronRanking,
    ks: &[usize],
) -> Result<Vec<ClassAccuracyRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let k = k.min(ranking.order.len());
        let e = ablate(model, data, ranking.layer, &ranking.order[..k])?;
        for (class, &accuracy) in e.per_class.iter().enumerate() {
            rows.push(ClassAccuracyRow {
                class,
                accuracy,
                topk_removed: k,
            });
        }
    }
    Ok(rows)
}

/// Connection importance from the importances of its two endpoint units:
/// `θ[i][j] = 1 - (1 - Ω_out[i]) (1 - Ω_in[j])`, shaped `out × in`.
pub fn param_importance(omega_out: &[f64], omega_in: &[f64]) -> Result<Matrix> {
    for &o in omega_out.iter().chain(omega_in) {
        if !(0.0..=1.0).contains(&o) {
            return Err(Error::InvalidArgument(format!("importance {o} outside [0, 1]")));
        }
    }
    Ok(Matrix::from_fn(omega_out.len(), omega_in.len(), |i, j| {
        1.0 - (1.0 - omega_out[i]) * (1.0 - omega_in[j])
    }))
}

/// Connection importance for every dense layer. Sides without a gate (the
/// input pixels, the output logits, ungated hidden layers) use `boundary`.
pub fn model_param_importance(model: &MlpModel, boundary: f64) -> Result<Vec<Matrix>> {
    let side = |l: usize, width: usize| -> Vec<f64> {
        match model.gate(l) {
            Some(g) if g.omega_count() > 0 => g.omega().to_vec(),
            _ => vec![boundary; width],
        }
    };
    let last = model.num_layers() - 1;
    (0..model.num_layers())
        .map(|l| {
            let d = model.layer(l);
            let omega_in = if l == 0 {
                vec![boundary; d.in_dim()]
            } else {
                side(l - 1, d.in_dim())
            };
            let omega_out = if l == last {
                vec![boundary; d.out_dim()]
            } else {
                side(l, d.out_dim())
            };
            param_importance(&omega_out, &omega_in)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStrategy {
    Random,
    Importance,
}

impl PruneStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneStrategy::Random => "random",
            PruneStrategy::Importance => "importance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub strategy: PruneStrategy,
    pub keep_ratio: f64,
    pub accuracy: f64,
    pub params_kept: usize,
}

/// Whether `keep_ratio` applies to all weights at once or to each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    Global,
    #[default]
    Layer,
}

/// Keep masks for a one-shot prune of the dense weights.
///
/// `importance` is one matrix per dense layer (see
/// [`model_param_importance`]). Equal scores are ordered by |w|, then by
/// position.
pub fn prune_masks(
    model: &MlpModel,
    keep_ratio: f64,
    strategy: PruneStrategy,
    scope: PruneScope,
    importance: Option<&[Matrix]>,
    rng: &mut Rng,
) -> Result<Vec<Option<Vec<bool>>>> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let sizes: Vec<usize> = model.layers().iter().map(|d| d.weights().data().len()).collect();
    let total: usize = sizes.iter().sum();
    let flat_imp: Option<Vec<f64>> = match strategy {
        PruneStrategy::Random => None,
        PruneStrategy::Importance => {
            let imp = importance
                .ok_or_else(|| Error::InvalidArgument("importance pruning needs importance scores".into()))?;
            if imp.len() != sizes.len() || imp.iter().zip(&sizes).any(|(m, &s)| m.data().len() != s) {
                return Err(Error::InvalidArgument("importance shape does not match the model".into()));
            }
            Some(imp.iter().flat_map(|m| m.data().iter().copied()).collect())
        }
    };
    let magnitude: Vec<f64> = model
        .layers()
        .iter()
        .flat_map(|d| d.weights().data().iter().map(|w| w.abs()))
        .collect();
    let groups: Vec<(usize, usize)> = match scope {
        PruneScope::Global => vec![(0, total)],
        PruneScope::Layer => {
            let mut start = 0;
            sizes
                .iter()
                .map(|&s| {
                    start += s;
                    (start - s, start)
                })
                .collect()
        }
    };
    let mut keep_flat = vec![false; total];
    for (lo, hi) in groups {
        let n = hi - lo;
        let keep = ((keep_ratio * n as f64).round() as usize).min(n);
        let chosen: Vec<usize> = match &flat_imp {
            None => rng.sample_indices(n, keep).into_iter().map(|i| lo + i).collect(),
            Some(flat) => {
                let mut order: Vec<usize> = (lo..hi).collect();
                order.sort_by(|&a, &b| {
                    flat[b]
                        .total_cmp(&flat[a])
                        .then(magnitude[b].total_cmp(&magnitude[a]))
                        .then(a.cmp(&b))
                });
                order.truncate(keep);
                order
            }
        };
        for i in chosen {
            keep_flat[i] = true;
        }
    }
    let mut masks = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for (l, &s) in sizes.iter().enumerate() {
        let mut m = keep_flat[start..start + s].to_vec();
        if let Some(existing) = model.layer(l).mask() {
            for (k, &e) in m.iter_mut().zip(existing) {
                *k &= e;
            }
        }
        masks.push(Some(m));
        start += s;
    }
    Ok(masks)
}

/// Prune a copy of the model once and evaluate it without retraining.
pub fn prune(
    model: &MlpModel,
    data: &dyn Samples,
    keep_ratio: f64,
    strategy: PruneStrategy,
    scope: PruneScope,
    importance: Option<&[Matrix]>,
    rng: &mut Rng,
) -> Result<PruneRow> {
    let masks = prune_masks(model, keep_ratio, strategy, scope, importance, rng)?;
    let mut pruned = model.clone();
    pruned.set_weight_masks(masks)?;
    let accuracy = evaluate(&pruned, data)?.accuracy;
    Ok(PruneRow {
        strategy,
        keep_ratio,
        accuracy,
        params_kept: pruned.kept_weights(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbRow {
    pub layer: usize,
    pub fraction: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Add Gaussian noise to the incoming weights of `⌈fraction·N⌉` random
/// units of hidden layer `layer` and measure accuracy, `repeats` times.
///
/// Noise std is `scale` times the population std of that layer's weights.
/// Each repeat starts from the unperturbed model.
pub fn perturb(
    model: &MlpModel,
    data: &dyn Samples,
    layer: usize,
    fraction: f64,
    scale: f64,
    rng: &mut Rng,
    repeats: usize,
) -> Result<PerturbRow> {
    check_fraction(fraction)?;
    if layer >= model.num_hidden() {
        return Err(Error::InvalidArgument(format!("hidden layer {layer} out of range")));
    }
    let w = model.layer(layer).weights();
    let (_, w_std) = mean_std(w.data());
    let sigma = scale * w_std;
    let width = w.rows();
    let k = ((fraction * width as f64).ceil() as usize).min(width);
    let mut accs = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let units = rng.sample_indices(width, k);
        let mut noisy = model.clone();
        {
            let wm = noisy.weights_mut(layer);
            for &u in &units {
                for x in wm.row_mut(u) {
                    *x += sigma * rng.normal();
                }
            }
        }
        if let Some(mask) = model.layer(layer).mask() {
            // keep pruned connections pruned
            let wm = noisy.weights_mut(layer);
            for (x, &keep) in wm.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *x = 0.0;
                }
            }
        }
        accs.push(evaluate(&noisy, data)?.accuracy);
    }
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    Ok(PerturbRow {
        layer,
        fraction,
        accuracy_mean,
        accuracy_std,
    })
}

/// Write `label,f0,f1,...` rows of hidden layer `layer` outputs.
pub fn export_features(model: &MlpModel, data: &dyn Samples, layer: usize, out: &mut dyn Write) -> Result<usize> {
    let outs = layer_outputs(model, data, layer)?;
    let io = |e| Error::io("writing features", e);
    let width = model.hidden_width(layer);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..width).map(|i| format!("f{i}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    let mut row_idx = 0;
    for chunk in &outs {
        let idx: Vec<usize> = (row_idx..row_idx + chunk.rows()).collect();
        let (_, labels) = data.gather(&idx);
        for (r, label) in chunk.row_iter().zip(labels) {
            let mut line = label.to_string();
            for v in r {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        row_idx += chunk.rows();
    }
    Ok(row_idx)
}

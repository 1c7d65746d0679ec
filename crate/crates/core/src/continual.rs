//! Permuted-pixel task sequences, diagonal-Fisher elastic weight
//! consolidation, and sequential multi-head training.
//!
//! All tasks share the hidden trunk; each task owns an output head and the
//! task id is known at test time.

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, Samples};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::histogram;
use crate::nn::{
    evaluate, sgd_step, sgd_step_layer, train_with, Activation, DenseLayer, Gradients, MlpConfig, MlpModel, ParamSet,
    Penalty, EVAL_BATCH,
};
use crate::rng::Rng;

/// Pixel permutations, one per task. Task 0 is the identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskSequence {
    permutations: Vec<Vec<usize>>,
    base_seed: u64,
}

impl TaskSequence {
    pub fn new(tasks: usize, dim: usize, base_seed: u64) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::InvalidArgument("a task sequence needs at least one task".into()));
        }
        let permutations = (0..tasks)
            .map(|t| {
                let mut p: Vec<usize> = (0..dim).collect();
                if t > 0 {
                    Rng::new(base_seed.wrapping_add(t as u64)).shuffle(&mut p);
                }
                p
            })
            .collect();
        Ok(Self { permutations, base_seed })
    }

    pub fn len(&self) -> usize {
        self.permutations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutations.is_empty()
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn permutation(&self, t: usize) -> &[usize] {
        &self.permutations[t]
    }

    /// Task `t` as a lazy view over `base`.
    pub fn view<'a>(&self, base: &'a dyn Samples, t: usize) -> Result<PermutedView<'a>> {
        PermutedView::new(base, self.permutations[t].clone())
    }
}

/// `out[i] = x[perm[i]]`
pub fn apply_permutation(perm: &[usize], x: &[f64]) -> Vec<f64> {
    perm.iter().map(|&p| x[p]).collect()
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// A dataset whose images have their pixels permuted on access.
pub struct PermutedView<'a> {
    base: &'a dyn Samples,
    perm: Vec<usize>,
    identity: bool,
}

impl<'a> PermutedView<'a> {
    pub fn new(base: &'a dyn Samples, perm: Vec<usize>) -> Result<Self> {
        if perm.len() != base.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} for {} inputs",
                perm.len(),
                base.input_dim()
            )));
        }
        let identity = perm.iter().enumerate().all(|(i, &p)| i == p);
        Ok(Self { base, perm, identity })
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

impl Samples for PermutedView<'_> {
    fn len(&self) -> usize {
        self.base.len()
    }

    fn input_dim(&self) -> usize {
        self.base.input_dim()
    }

    fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let (x, y) = self.base.gather(idx);
        if self.identity {
            return (x, y);
        }
        let cols = x.cols();
        let mut out = Matrix::zeros(x.rows(), cols);
        for (r, row) in x.row_iter().enumerate() {
            for (o, &p) in out.row_mut(r).iter_mut().zip(&self.perm) {
                *o = row[p];
            }
        }
        (out, y)
    }
}

/// Build `tasks` permuted views of `base`.
pub fn make_permuted_tasks(base: &dyn Samples, tasks: usize, base_seed: u64) -> Result<(TaskSequence, Vec<PermutedView<'_>>)> {
    let seq = TaskSequence::new(tasks, base.input_dim(), base_seed)?;
    let views = (0..tasks).map(|t| seq.view(base, t)).collect::<Result<_>>()?;
    Ok((seq, views))
}

/// Diagonal empirical Fisher of one task plus the parameters it was taken at.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherInfo {
    pub diag: ParamSet,
    pub anchor: ParamSet,
}

impl FisherInfo {
    /// Drop the output layer from the consolidation (its head is private to
    /// the task).
    pub fn trunk_only(mut self) -> Self {
        if let Some(last) = self.diag.layers.last_mut() {
            last.weights.data_mut().iter_mut().for_each(|x| *x = 0.0);
            last.bias.iter_mut().for_each(|x| *x = 0.0);
        }
        self
    }

    /// Fisher values of the shared dense weights and biases (no output layer,
    /// no gate weights), flattened in layer order.
    pub fn trunk_values(&self) -> Vec<f64> {
        let n = self.diag.layers.len();
        self.diag.layers[..n.saturating_sub(1)]
            .iter()
            .flat_map(|p| p.weights.data().iter().chain(&p.bias).copied())
            .collect()
    }
}

/// Mean squared gradient of `log p(y|x)` over the first `n_samples` samples.
pub fn fisher_diagonal(model: &MlpModel, data: &dyn Samples, n_samples: usize) -> Result<FisherInfo> {
    if data.is_empty() || n_samples == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = if n_samples > data.len() {
        log::warn!(
            "fisher sample count {n_samples} exceeds dataset size {}, using {}",
            data.len(),
            data.len()
        );
        data.len()
    } else {
        n_samples
    };
    let anchor = model.params();
    let mut diag = anchor.zeros_like();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, y) = data.gather(&idx);
        let trace = model.forward(&x)?;
        diag.axpy(1.0, &model.squared_nll_grads(&trace, &y)?);
        start = end;
    }
    let diag = diag.map(|v| v / n as f64);
    Ok(FisherInfo { diag, anchor })
}

/// `Σ_t (λ/2) Σ_p F_p (θ_p − θ*_p)²` and its gradient.
pub fn ewc_penalty(params: &ParamSet, fishers: &[FisherInfo], lambda: f64) -> (f64, ParamSet) {
    let mut grad = params.zeros_like();
    let mut value = 0.0;
    let theta = params.slices();
    for f in fishers {
        let fs = f.diag.slices();
        let anchors = f.anchor.slices();
        let mut k = 0;
        grad.zip_slices_mut(params, |g, _| {
            for (i, gi) in g.iter_mut().enumerate() {
                let d = theta[k][i] - anchors[k][i];
                value += 0.5 * lambda * fs[k][i] * d * d;
                *gi += lambda * fs[k][i] * d;
            }
            k += 1;
        });
    }
    (value, grad)
}

/// Consolidation penalty over every completed task.
pub struct Ewc<'a> {
    pub fishers: &'a [FisherInfo],
    pub lambda: f64,
}

impl Penalty for Ewc<'_> {
    fn apply(&self, model: &MlpModel, grads: &mut Gradients) -> f64 {
        if self.lambda == 0.0 || self.fishers.is_empty() {
            return 0.0;
        }
        let (value, g) = ewc_penalty(&model.params(), self.fishers, self.lambda);
        grads.axpy(1.0, &g);
        value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sgd,
    Ewc,
    EwcF,
    Joint,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Sgd => "sgd",
            Strategy::Ewc => "ewc",
            Strategy::EwcF => "ewc_f",
            Strategy::Joint => "joint",
        }
    }

    pub fn uses_forgetting(self) -> bool {
        matches!(self, Strategy::EwcF)
    }

    pub fn uses_ewc(self) -> bool {
        matches!(self, Strategy::Ewc | Strategy::EwcF)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinualConfig {
    /// Trunk and head shape plus optimiser settings; `forgetting` is set by
    /// the strategy.
    pub model: MlpConfig,
    pub lambda_ewc: f64,
    pub fisher_samples: usize,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            model: MlpConfig {
                layer_sizes: vec![784, 512, 256, 10],
                ..MlpConfig::default()
            },
            lambda_ewc: 100.0,
            fisher_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinualReport {
    pub strategy: Strategy,
    /// Row `t` holds accuracy on tasks `0..=t` after training task `t`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub average_accuracy: Vec<f64>,
}

impl ContinualReport {
    pub fn final_average(&self) -> f64 {
        self.average_accuracy.last().copied().unwrap_or(0.0)
    }
}

/// Outcome of one sequential run.
#[derive(Debug, Clone)]
pub struct ContinualRun {
    pub report: ContinualReport,
    /// Trunk-only Fisher per task; empty for strategies that do not compute it.
    pub fishers: Vec<FisherInfo>,
    pub model: MlpModel,
    pub heads: Vec<DenseLayer>,
}

fn init_head(config: &MlpConfig, task: usize) -> Result<DenseLayer> {
    let sizes = &config.layer_sizes;
    let (fan_in, fan_out) = (sizes[sizes.len() - 2], sizes[sizes.len() - 1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = Rng::new(config.seed ^ (0xA5A5_0000_0000_0000 | task as u64));
    let w = Matrix::from_fn(fan_out, fan_in, |_, _| rng.uniform(-limit, limit));
    DenseLayer::new(w, vec![0.0; fan_out], Activation::Identity)
}

fn install_head(model: &mut MlpModel, head: &DenseLayer) -> Result<DenseLayer> {
    let last = model.num_layers() - 1;
    model.replace_layer(last, head.clone())
}

fn average(row: &[f64]) -> f64 {
    row.iter().sum::<f64>() / row.len().max(1) as f64
}

fn accuracy_row(model: &mut MlpModel, heads: &[DenseLayer], test: &[&dyn Samples], upto: usize) -> Result<Vec<f64>> {
    (0..=upto)
        .map(|k| {
            install_head(model, &heads[k])?;
            Ok(evaluate(model, test[k])?.accuracy)
        })
        .collect()
}

/// Train the tasks one after another (or all at once for `Joint`) and record
/// task-aware test accuracy after each task.
pub fn train_sequential(
    strategy: Strategy,
    train: &[&dyn Samples],
    test: &[&dyn Samples],
    cfg: &ContinualConfig,
) -> Result<ContinualRun> {
    if train.is_empty() || train.len() != test.len() {
        return Err(Error::InvalidArgument("need one train and one test set per task".into()));
    }
    let mut mc = cfg.model.clone();
    mc.forgetting = strategy.uses_forgetting();
    let mut model = MlpModel::new(mc)?;
    let tasks = train.len();
    let last = model.num_layers() - 1;
    let mut heads = vec![model.layer(last).clone()];
    for t in 1..tasks {
        heads.push(init_head(model.config(), t)?);
    }

    if strategy == Strategy::Joint {
        train_joint(&mut model, &mut heads, train)?;
        let full = accuracy_row(&mut model, &heads, test, tasks - 1)?;
        let accuracy_matrix: Vec<Vec<f64>> = (0..tasks).map(|t| full[..=t].to_vec()).collect();
        let average_accuracy = accuracy_matrix.iter().map(|r| average(r)).collect();
        return Ok(ContinualRun {
            report: ContinualReport {
                strategy,
                accuracy_matrix,
                average_accuracy,
            },
            fishers: Vec::new(),
            model,
            heads,
        });
    }

    let base = model.config().schedule();
    let mut fishers: Vec<FisherInfo> = Vec::new();
    let mut accuracy_matrix = Vec::with_capacity(tasks);
    for t in 0..tasks {
        install_head(&mut model, &heads[t])?;
        let mut schedule = base;
        schedule.seed = base.seed.wrapping_add(t as u64);
        let ewc = Ewc {
            fishers: &fishers,
            lambda: cfg.lambda_ewc,
        };
        let penalty: Option<&dyn Penalty> = if strategy.uses_ewc() { Some(&ewc) } else { None };
        train_with(&mut model, train[t], schedule, penalty)?;
        heads[t] = model.layer(last).clone();
        if strategy.uses_ewc() {
            fishers.push(fisher_diagonal(&model, train[t], cfg.fisher_samples)?.trunk_only());
        }
        accuracy_matrix.push(accuracy_row(&mut model, &heads, test, t)?);
        log::info!(
            "{} task {t}: mean accuracy {:.4}",
            strategy.as_str(),
            average(accuracy_matrix.last().unwrap())
        );
    }
    let average_accuracy = accuracy_matrix.iter().map(|r| average(r)).collect();
    Ok(ContinualRun {
        report: ContinualReport {
            strategy,
            accuracy_matrix,
            average_accuracy,
        },
        fishers,
        model,
        heads,
    })
}

/// `(task, index)` pairs of the union of all tasks, ordered by task id then
/// sample index.
pub fn union_index(sizes: &[usize]) -> Vec<(usize, usize)> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect()
}

/// One pass schedule over the union of tasks. Each row of a mixed batch is
/// scored by its task's head; the trunk takes one step on the batch-mean loss
/// and each head on its rows' share of it.
fn train_joint(model: &mut MlpModel, heads: &mut [DenseLayer], train: &[&dyn Samples]) -> Result<()> {
    let sizes: Vec<usize> = train.iter().map(|d| d.len()).collect();
    let union = union_index(&sizes);
    if union.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schedule = model.config().schedule();
    let in_dim = model.input_dim();
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        for batch in batch_iter(union.len(), schedule.batch_size, schedule.seed, epoch as u64) {
            let mut x = Matrix::zeros(batch.len(), in_dim);
            let mut y = Vec::with_capacity(batch.len());
            let mut row_head = Vec::with_capacity(batch.len());
            for (r, &u) in batch.iter().enumerate() {
                let (t, i) = union[u];
                let (xi, yi) = train[t].gather(&[i]);
                x.row_mut(r).copy_from_slice(xi.row(0));
                y.push(yi[0]);
                row_head.push(t);
            }
            let (trunk, head_grads, loss) = model.backward_multihead(&x, &y, &row_head, heads)?;
            if !loss.total.is_finite() {
                return Err(Error::Diverged { step, loss: loss.total });
            }
            sgd_step(model, &trunk, schedule.lr)?;
            for (head, g) in heads.iter_mut().zip(&head_grads) {
                sgd_step_layer(head, g, schedule.lr)?;
            }
            step += 1;
        }
    }
    Ok(())
}

/// Histogram of a run's summed trunk Fisher, scaled by its maximum into
/// `[0, 1]`.
pub fn importance_distribution(fishers: &[FisherInfo], bins: usize) -> Result<Vec<usize>> {
    let first = fishers
        .first()
        .ok_or_else(|| Error::InvalidArgument("no Fisher information to summarise".into()))?;
    let mut total = first.trunk_values();
    for f in &fishers[1..] {
        for (a, v) in total.iter_mut().zip(f.trunk_values()) {
            *a += v;
        }
    }
    let max = total.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        total.iter_mut().for_each(|v| *v /= max);
    }
    histogram(&total, bins, (0.0, 1.0))
}

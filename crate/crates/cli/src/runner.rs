use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use forgetnet_core::analysis::{
    ablation_sweep, export_features, model_param_importance, perturb, prune, rank_layer, topk_class_collapse,
    PruneStrategy,
};
use forgetnet_core::continual::{importance_distribution, make_permuted_tasks, train_sequential, ContinualConfig};
use forgetnet_core::data::{load_split, parse_digest_list, resolve_data_dir, Samples, Split};
use forgetnet_core::gradcheck::{check_model, random_batch, randomize_for_check};
use forgetnet_core::metrics::{activation_stats, histogram, layer_outputs, sparsity_report, SparsityNorm};
use forgetnet_core::nn::{evaluate, train, TrainLog};
use forgetnet_core::report::{continual_rows, histogram_rows, rate_rows, sparsity_rows, write_csv, write_json};
use forgetnet_core::{Dataset, MlpConfig, MlpModel, Rng};
use serde::Serialize;

use crate::config::{ExperimentConfig, ExperimentKind, MeasureSet};
use crate::error::CliError;

const IMPORTANCE_BATCH: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub wall_time: f64,
    pub headline_metrics: BTreeMap<String, f64>,
}

pub struct Loaded {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    resolve_data_dir(cfg.data.dir.as_deref()).join(&cfg.data.dataset)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Loaded, CliError> {
    let dir = dataset_dir(cfg);
    for split in ["train", "t10k"] {
        for kind in ["images-idx3", "labels-idx1"] {
            let p = dir.join(format!("{split}-{kind}-ubyte"));
            if !p.is_file() {
                return Err(CliError::MissingData(p));
            }
        }
    }
    let digests = match &cfg.data.digests {
        Some(name) => {
            let p = dir.join(name);
            match fs::read_to_string(&p) {
                Ok(text) => Some(parse_digest_list(&text)?),
                Err(_) => {
                    log::warn!("digest list {} not found, skipping integrity check", p.display());
                    None
                }
            }
        }
        None => None,
    };
    let name = cfg.data.dataset.as_str();
    let mut train = load_split(&dir, Split::Train, name, digests.as_deref())?;
    let mut test = load_split(&dir, Split::Test, name, digests.as_deref())?;
    if let Some(n) = cfg.data.train_limit {
        train = train.take(n);
    }
    if let Some(n) = cfg.data.test_limit {
        test = test.take(n);
    }
    log::info!("loaded {name}: {} train, {} test", train.len(), test.len());
    Ok(Loaded { train, test })
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("out").join(cfg.kind().as_str()))
}

/// Run one experiment, writing its CSVs, the resolved config and a summary
/// into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary, CliError> {
    let start = Instant::now();
    let out = out_dir(cfg);
    fs::create_dir_all(&out).map_err(|e| CliError::Io {
        context: format!("creating {}", out.display()),
        source: e,
    })?;
    write_json(&out.join("config.json"), cfg)?;
    let kind = cfg.kind();
    let metrics = match kind {
        ExperimentKind::Gradcheck => run_gradcheck(cfg, &out)?,
        ExperimentKind::Continual => run_continual(cfg, &out, &load_data(cfg)?)?,
        other => {
            let data = load_data(cfg)?;
            match other {
                ExperimentKind::Train => run_train(cfg, &out, &data)?,
                ExperimentKind::Sparsity => run_sparsity(cfg, &out, &data)?,
                ExperimentKind::Ablate => run_ablate(cfg, &out, &data)?,
                ExperimentKind::Prune => run_prune(cfg, &out, &data)?,
                ExperimentKind::Perturb => run_perturb(cfg, &out, &data)?,
                ExperimentKind::ExportFeatures => run_export(cfg, &out, &data)?,
                ExperimentKind::Gradcheck | ExperimentKind::Continual => unreachable!(),
            }
        }
    };
    let summary = Summary {
        experiment: kind.as_str().into(),
        seed: cfg.seed,
        wall_time: start.elapsed().as_secs_f64(),
        headline_metrics: metrics,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

type Metrics = BTreeMap<String, f64>;

fn fit(name: &str, mc: MlpConfig, data: &Loaded) -> Result<(MlpModel, TrainLog), CliError> {
    let t = Instant::now();
    let mut model = MlpModel::new(mc)?;
    let log = train(&mut model, &data.train)?;
    log::info!("trained {name} in {:.1}s", t.elapsed().as_secs_f64());
    Ok((model, log))
}

fn measure(model: &mut MlpModel, cfg: &ExperimentConfig, data: &Loaded) -> Result<(), CliError> {
    let set: &dyn Samples = match cfg.data.importance_set {
        MeasureSet::Train => &data.train,
        MeasureSet::Test => &data.test,
    };
    model.measure_importance(set, IMPORTANCE_BATCH)?;
    Ok(())
}

fn hidden_layers(cfg: &ExperimentConfig, model: &MlpModel) -> Result<Vec<usize>, CliError> {
    let layers = cfg
        .layers
        .clone()
        .unwrap_or_else(|| (0..model.num_hidden()).collect());
    if let Some(&bad) = layers.iter().find(|&&l| l >= model.num_hidden()) {
        return Err(CliError::Config(format!(
            "layer {bad} out of range for {} hidden layers",
            model.num_hidden()
        )));
    }
    Ok(layers)
}

fn require_gates(model: &MlpModel, what: &str) -> Result<(), CliError> {
    if model.has_gates() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} needs a model with forgetting layers")))
    }
}

fn rng_for(cfg: &ExperimentConfig, salt: u64) -> Rng {
    Rng::new(cfg.seed ^ salt)
}

#[derive(Serialize)]
struct AccuracyRow<'a> {
    variant: &'a str,
    train_accuracy: f64,
    test_accuracy: f64,
    mean_sparsity: f64,
}

fn run_train(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let mut metrics = Metrics::new();
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for (name, mc) in cfg.resolved_variants()? {
        let (model, log) = fit(&name, mc, data)?;
        write_csv(&out.join(format!("loss_{name}.csv")), &log.losses)?;
        if model.has_gates() {
            write_csv(&out.join(format!("sigma_{name}.csv")), &log.sigma)?;
        }
        let sp = sparsity_report(&model, &data.test, cfg.threshold, SparsityNorm::Multiplier)?;
        write_csv(&out.join(format!("sparsity_{name}.csv")), &sparsity_rows(&sp))?;
        let mean_sparsity = sp.per_layer.iter().map(|l| l.s).sum::<f64>() / sp.per_layer.len().max(1) as f64;
        let train_accuracy = evaluate(&model, &data.train)?.accuracy;
        let test_accuracy = evaluate(&model, &data.test)?.accuracy;
        metrics.insert(format!("{name}.train_accuracy"), train_accuracy);
        metrics.insert(format!("{name}.test_accuracy"), test_accuracy);
        metrics.insert(format!("{name}.mean_sparsity"), mean_sparsity);
        names.push(name);
        rows.push((train_accuracy, test_accuracy, mean_sparsity));
    }
    let rows: Vec<AccuracyRow> = names
        .iter()
        .zip(&rows)
        .map(|(n, &(train_accuracy, test_accuracy, mean_sparsity))| AccuracyRow {
            variant: n,
            train_accuracy,
            test_accuracy,
            mean_sparsity,
        })
        .collect();
    write_csv(&out.join("accuracy.csv"), &rows)?;
    Ok(metrics)
}

#[derive(Serialize)]
struct NeuronStatRow {
    layer: usize,
    neuron: usize,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct OmegaRow {
    layer: usize,
    neuron: usize,
    omega: f64,
}

fn omega_rows(model: &MlpModel) -> Vec<OmegaRow> {
    model
        .gates()
        .iter()
        .enumerate()
        .filter_map(|(l, g)| g.as_ref().map(|g| (l, g)))
        .flat_map(|(layer, g)| {
            g.omega()
                .iter()
                .enumerate()
                .map(move |(neuron, &omega)| OmegaRow { layer, neuron, omega })
        })
        .collect()
}

fn run_sparsity(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let mut metrics = Metrics::new();
    for (name, mc) in cfg.resolved_variants()? {
        let (mut model, log) = fit(&name, mc, data)?;
        let sp = sparsity_report(&model, &data.test, cfg.threshold, SparsityNorm::Multiplier)?;
        write_csv(&out.join(format!("sparsity_{name}.csv")), &sparsity_rows(&sp))?;
        write_csv(&out.join(format!("rates_{name}.csv")), &rate_rows(&sp))?;
        let mut stats = Vec::new();
        for layer in 0..model.num_hidden() {
            let outs = layer_outputs(&model, &data.test, layer)?;
            for (neuron, (mean, std)) in activation_stats(&outs)?.into_iter().enumerate() {
                stats.push(NeuronStatRow { layer, neuron, mean, std });
            }
        }
        write_csv(&out.join(format!("activation_{name}.csv")), &stats)?;
        for l in &sp.per_layer {
            metrics.insert(format!("{name}.layer{}.sparsity", l.layer), l.s);
        }
        metrics.insert(format!("{name}.test_accuracy"), evaluate(&model, &data.test)?.accuracy);
        if model.has_gates() {
            write_csv(&out.join(format!("sigma_{name}.csv")), &log.sigma)?;
            measure(&mut model, cfg, data)?;
            write_csv(&out.join(format!("omega_{name}.csv")), &omega_rows(&model))?;
            for (l, g) in model.gates().iter().enumerate() {
                if let Some(g) = g {
                    let counts = histogram(g.omega(), cfg.bins, (0.0, 1.0))?;
                    write_csv(
                        &out.join(format!("omega_hist_{name}_layer{l}.csv")),
                        &histogram_rows(&counts, (0.0, 1.0)),
                    )?;
                }
            }
        }
    }
    Ok(metrics)
}

fn frac_key(f: f64) -> String {
    format!("{f}")
}

fn run_ablate(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let (mut model, _) = fit("model", cfg.model.clone(), data)?;
    require_gates(&model, "ablation")?;
    measure(&mut model, cfg, data)?;
    write_csv(&out.join("omega.csv"), &omega_rows(&model))?;
    let full = evaluate(&model, &data.test)?.accuracy;
    let mut metrics = Metrics::new();
    metrics.insert("full_accuracy".into(), full);
    let mut rng = rng_for(cfg, 0xAB1A);
    let repeats = cfg.repeats.unwrap_or(10);
    let mut rows = Vec::new();
    for layer in hidden_layers(cfg, &model)? {
        let ranking = rank_layer(&model, layer)?;
        for &mode in &cfg.ablation_modes {
            let r = ablation_sweep(&model, &data.test, &ranking, mode, &cfg.fractions, repeats, &mut rng)?;
            for row in &r {
                metrics.insert(
                    format!("layer{layer}.{}.{}", mode.as_str(), frac_key(row.fraction)),
                    row.accuracy_mean,
                );
            }
            rows.extend(r);
        }
        let per_class = topk_class_collapse(&model, &data.test, &ranking, &cfg.topk)?;
        write_csv(&out.join(format!("per_class_layer{layer}.csv")), &per_class)?;
    }
    write_csv(&out.join("ablation.csv"), &rows)?;
    Ok(metrics)
}

fn run_prune(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let (mut model, _) = fit("model", cfg.model.clone(), data)?;
    let mut metrics = Metrics::new();
    metrics.insert("full_accuracy".into(), evaluate(&model, &data.test)?.accuracy);
    let importance = if cfg.prune_strategies.contains(&PruneStrategy::Importance) {
        require_gates(&model, "importance pruning")?;
        measure(&mut model, cfg, data)?;
        Some(model_param_importance(&model, cfg.boundary_importance)?)
    } else {
        None
    };
    let mut rng = rng_for(cfg, 0x9A11);
    let mut rows = Vec::new();
    for &strategy in &cfg.prune_strategies {
        for &k in &cfg.keep_ratios {
            let row = prune(&model, &data.test, k, strategy, cfg.prune_scope, importance.as_deref(), &mut rng)?;
            metrics.insert(format!("{}.{}", strategy.as_str(), frac_key(k)), row.accuracy);
            rows.push(row);
        }
    }
    write_csv(&out.join("prune.csv"), &rows)?;
    Ok(metrics)
}

fn run_perturb(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let mut metrics = Metrics::new();
    let repeats = cfg.repeats.unwrap_or(5);
    for (name, mc) in cfg.resolved_variants()? {
        let (model, _) = fit(&name, mc, data)?;
        let full = evaluate(&model, &data.test)?.accuracy;
        metrics.insert(format!("{name}.full_accuracy"), full);
        let layers = match &cfg.layers {
            Some(_) => hidden_layers(cfg, &model)?,
            None => vec![model.num_hidden() - 1],
        };
        let mut rng = rng_for(cfg, 0x9E27);
        let mut rows = Vec::new();
        for layer in layers {
            for &f in &cfg.fractions {
                let row = perturb(&model, &data.test, layer, f, cfg.scale, &mut rng, repeats)?;
                metrics.insert(format!("{name}.layer{layer}.{}.drop", frac_key(f)), full - row.accuracy_mean);
                rows.push(row);
            }
        }
        write_csv(&out.join(format!("perturb_{name}.csv")), &rows)?;
    }
    Ok(metrics)
}

fn run_export(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let mut metrics = Metrics::new();
    for (name, mc) in cfg.resolved_variants()? {
        let (model, _) = fit(&name, mc, data)?;
        let layer = match &cfg.layers {
            Some(_) => hidden_layers(cfg, &model)?[0],
            None => model.num_hidden() - 1,
        };
        let path = out.join(format!("features_{name}.csv"));
        let mut buf = Vec::new();
        let n = export_features(&model, &data.test, layer, &mut buf)?;
        fs::write(&path, buf).map_err(|e| CliError::Io {
            context: format!("writing {}", path.display()),
            source: e,
        })?;
        metrics.insert(format!("{name}.rows"), n as f64);
    }
    Ok(metrics)
}

fn run_continual(cfg: &ExperimentConfig, out: &Path, data: &Loaded) -> Result<Metrics, CliError> {
    let (_, train_views) = make_permuted_tasks(&data.train, cfg.tasks, cfg.task_seed)?;
    let (_, test_views) = make_permuted_tasks(&data.test, cfg.tasks, cfg.task_seed)?;
    let train: Vec<&dyn Samples> = train_views.iter().map(|v| v as &dyn Samples).collect();
    let test: Vec<&dyn Samples> = test_views.iter().map(|v| v as &dyn Samples).collect();
    let cc = ContinualConfig {
        model: cfg.model.clone(),
        lambda_ewc: cfg.lambda_ewc,
        fisher_samples: cfg.fisher_samples,
    };
    let mut metrics = Metrics::new();
    for &s in &cfg.strategies {
        let t = Instant::now();
        let result = train_sequential(s, &train, &test, &cc)?;
        log::info!("{} finished in {:.1}s", s.as_str(), t.elapsed().as_secs_f64());
        let name = s.as_str();
        let report = &result.report;
        write_csv(&out.join(format!("continual_{name}.csv")), &continual_rows(report))?;
        metrics.insert(format!("{name}.average_accuracy"), report.final_average());
        metrics.insert(format!("{name}.first_task_initial"), report.accuracy_matrix[0][0]);
        metrics.insert(
            format!("{name}.first_task_final"),
            report.accuracy_matrix.last().expect("at least one task")[0],
        );
        if !result.fishers.is_empty() {
            let counts = importance_distribution(&result.fishers, cfg.bins)?;
            let total: usize = counts.iter().sum();
            metrics.insert(format!("{name}.lowest_bin_mass"), counts[0] as f64 / total.max(1) as f64);
            write_csv(
                &out.join(format!("fisher_hist_{name}.csv")),
                &histogram_rows(&counts, (0.0, 1.0)),
            )?;
        }
    }
    Ok(metrics)
}

#[derive(Serialize)]
struct GradCheckRow {
    net: usize,
    checked: usize,
    max_rel_error: f64,
    worst_param: String,
    passed: bool,
}

fn run_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<Metrics, CliError> {
    let mut rng = rng_for(cfg, 0x6C4E);
    let mut rows = Vec::new();
    for net in 0..cfg.gradcheck_nets.max(1) {
        let mut mc = cfg.model.clone();
        mc.seed = cfg.seed.wrapping_add(net as u64);
        let mut model = MlpModel::new(mc)?;
        randomize_for_check(&mut model, &mut rng);
        let (x, y) = random_batch(&model, cfg.gradcheck_batch.max(1), &mut rng);
        let r = check_model(&model, &x, &y)?;
        rows.push(GradCheckRow {
            net,
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            worst_param: r.worst_param.clone(),
            passed: r.passed,
        });
    }
    write_csv(&out.join("gradcheck.csv"), &rows)?;
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one net");
    let mut metrics = Metrics::new();
    metrics.insert("max_rel_error".into(), worst.max_rel_error);
    metrics.insert("passed".into(), if rows.iter().all(|r| r.passed) { 1.0 } else { 0.0 });
    metrics.insert("nets".into(), rows.len() as f64);
    if !rows.iter().all(|r| r.passed) {
        return Err(CliError::GradCheck {
            max_rel_error: worst.max_rel_error,
            param: worst.worst_param.clone(),
        });
    }
    Ok(metrics)
}

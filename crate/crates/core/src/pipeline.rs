//! The end-to-end driver: group learning, pruning, fine-tuning, and the
//! files a run leaves behind.
//!
//! A run directory holds `config.txt`, `metrics.csv` (one row per epoch of
//! every phase, appended as training goes), `dense.dspc` (the phase-one
//! network with its group logits), `structure.txt`, `report.txt`,
//! `pruned.dspc` (the compiled model) and the summary in both
//! `summary.txt` and `summary.kv`. Every file except `metrics.csv` is
//! written to a temporary name and renamed into place.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compile::{compile, count_pruned_params_flops, count_structure_cost, save_compiled, save_dense, write_atomic, CompiledModel};
use crate::config::{Method, PipelineConfig};
use crate::data::{epoch_order, load_mnist, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::grouping::{group_learning_phase, AlphaSource, EpochMetrics, GroupLearnConfig, GroupParameters};
use crate::model::{build_toy_net, count_dense_params_flops, Network, NetworkMask};
use crate::optim::Sgd;
use crate::oracle::{channel_prune_baseline, format_partition, BaselineRule};
use crate::pruning::{discretize_alpha, prune, PrunedStructure};
use crate::train::{accuracy, decayed_lr, loss_and_grads, minibatches, EVAL_CHUNK};

/// Salt that separates the fine-tuning data order from phase one's.
const FINETUNE_ORDER_SALT: u64 = 0x5EED_F1E7;

pub fn load_data(config: &PipelineConfig) -> Result<DatasetHandle> {
    let data = load_mnist(&config.data_dir)?;
    let cap = |limit: Option<usize>, split: &Split| limit.unwrap_or(split.len()).min(split.len());
    Ok(data.truncated(
        cap(config.train_limit, &data.train),
        cap(config.validation_limit, &data.validation),
        cap(config.test_limit, &data.test),
    ))
}

/// The toy network with weights drawn from `seed`.
pub fn init_network(seed: u64) -> Result<Network> {
    Network::init(build_toy_net(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub phase: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub regularizer: f64,
    /// Mean row entropy of the group distribution, if groups are learned.
    pub entropy: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "phase,epoch,lr,loss,regularizer,entropy,val_accuracy,seconds";

    pub fn from_epoch(phase: &'static str, m: &EpochMetrics) -> Self {
        MetricsRow {
            phase,
            epoch: m.epoch,
            lr: m.lr,
            loss: m.loss,
            regularizer: m.regularizer,
            entropy: (!m.entropy.is_empty()).then(|| m.entropy.iter().sum::<f64>() / m.entropy.len() as f64),
            val_accuracy: m.val_accuracy,
            seconds: m.seconds,
        }
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{},{:.6e},{:.6},{:.6},{},{},{:.2}",
            self.phase,
            self.epoch,
            self.lr,
            self.loss,
            self.regularizer,
            opt(self.entropy),
            opt(self.val_accuracy),
            self.seconds
        )
    }
}

/// Append-only CSV sink; `None` discards rows.
pub struct MetricsLog {
    file: Option<std::fs::File>,
}

impl MetricsLog {
    pub fn discard() -> Self {
        MetricsLog { file: None }
    }

    /// Starts a fresh file with a header.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", MetricsRow::HEADER)?;
        Ok(MetricsLog { file: Some(file) })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.to_csv())?;
            f.flush()?;
        }
        Ok(())
    }
}

/// Plain training on the task loss: momentum SGD with the configured
/// schedule, no regularizer, no groups.
pub fn train_dense(
    net: &mut Network,
    train: &Split,
    validation: Option<&Split>,
    config: &GroupLearnConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    let mut sgd = Sgd::new(config.weight_lr, config.momentum);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let started = std::time::Instant::now();
        sgd.lr = decayed_lr(config.weight_lr, config.lr_decay, epoch);
        let order = epoch_order(train.len(), config.seed, epoch);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for batch in minibatches(&order, config.batch_size) {
            let (x, y) = train.batch(batch);
            let lg = loss_and_grads(net, &x, &y, None, 0)?;
            net.update_running_stats(&lg.batch_stats);
            let grads: Vec<_> = lg.grads.into_iter().map(Option::unwrap).collect();
            sgd.step(net.trainable_mut(), &grads);
            loss_sum += lg.loss;
            steps += 1;
        }
        let row = EpochMetrics {
            epoch,
            lr: sgd.lr,
            loss: loss_sum / steps.max(1) as f64,
            regularizer: 0.0,
            entropy: Vec::new(),
            val_accuracy: validation.map(|v| accuracy(net, v, None)).transpose()?,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        history.push(row);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl FinetuneSettings {
    pub fn from_config(config: &PipelineConfig) -> Self {
        FinetuneSettings {
            epochs: config.finetune_epochs,
            lr: config.finetune_lr,
            lr_decay: config.group.lr_decay,
            momentum: config.group.momentum,
            batch_size: config.group.batch_size,
            seed: config.group.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    /// Zero means the pruned weights before any fine-tuning were best.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochMetrics>,
}

/// Gradient descent on the task loss of the masked network. The returned
/// network is the best-validation snapshot, counting the starting point as
/// epoch 0; a later epoch must be strictly better to replace it.
pub fn finetune(
    net: &mut Network,
    mask: &NetworkMask,
    train: &Split,
    validation: &Split,
    settings: &FinetuneSettings,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FinetuneOutcome> {
    let mut best = (0, accuracy(net, validation, Some(mask))?, net.clone());
    let mut sgd = Sgd::new(settings.lr, settings.momentum);
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let started = std::time::Instant::now();
        sgd.lr = decayed_lr(settings.lr, settings.lr_decay, epoch);
        let order = epoch_order(train.len(), settings.seed ^ FINETUNE_ORDER_SALT, epoch);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for batch in minibatches(&order, settings.batch_size) {
            let (x, y) = train.batch(batch);
            let lg = loss_and_grads(net, &x, &y, Some(mask), 0)?;
            net.update_running_stats(&lg.batch_stats);
            let grads: Vec<_> = lg.grads.into_iter().map(Option::unwrap).collect();
            sgd.step(net.trainable_mut(), &grads);
            loss_sum += lg.loss;
            steps += 1;
        }
        let val = accuracy(net, validation, Some(mask))?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr: sgd.lr,
            loss: loss_sum / steps.max(1) as f64,
            regularizer: 0.0,
            entropy: Vec::new(),
            val_accuracy: Some(val),
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&row);
        history.push(row);
        if val > best.1 {
            best = (epoch + 1, val, net.clone());
        }
    }
    *net = best.2;
    Ok(FinetuneOutcome {
        best_epoch: best.0,
        best_val_accuracy: best.1,
        history,
    })
}

/// Top-1 accuracy in percent of a compiled model.
pub fn compiled_accuracy(model: &CompiledModel, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Ok(0.0);
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = split.batch(chunk);
        let pred = model.forward(&x)?.argmax_rows();
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(100.0 * correct as f64 / split.len() as f64)
}

/// Ordered key/value results of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub entries: Vec<(String, String)>,
}

impl Summary {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn to_kv(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Data(format!("summary line {l:?} lacks '='")))
            })
            .collect::<Result<_>>()?;
        Ok(Summary { entries })
    }

    pub fn to_text(&self) -> String {
        let pct = |k: &str| self.get_f64(k).map_or("-".to_string(), |v| format!("{v:.2}%"));
        let mut s = String::new();
        let _ = writeln!(s, "method            {}", self.get("method").unwrap_or("-"));
        let _ = writeln!(
            s,
            "groups            {}   beta {}   lambda {}   seed {}",
            self.get("groups").unwrap_or("-"),
            self.get("beta").unwrap_or("-"),
            self.get("lambda").unwrap_or("-"),
            self.get("seed").unwrap_or("-")
        );
        let _ = writeln!(s, "dense accuracy    {} (test)", pct("dense_test_accuracy"));
        let _ = writeln!(s, "pruned, no tuning {} (test)", pct("pruned_test_accuracy_before_finetune"));
        let _ = writeln!(s, "final accuracy    {} (test)", pct("final_test_accuracy"));
        let _ = writeln!(
            s,
            "params            {} -> {}  ({} fewer)",
            self.get("dense_params").unwrap_or("-"),
            self.get("pruned_params").unwrap_or("-"),
            pct("params_reduction_pct")
        );
        let _ = writeln!(
            s,
            "FLOPs             {} -> {}  ({} fewer)",
            self.get("dense_flops").unwrap_or("-"),
            self.get("pruned_flops").unwrap_or("-"),
            pct("flops_reduction_pct")
        );
        s
    }
}

/// Paths of a run directory.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        RunFiles { dir: dir.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn dense(&self) -> PathBuf {
        self.dir.join("dense.dspc")
    }
    pub fn pruned(&self) -> PathBuf {
        self.dir.join("pruned.dspc")
    }
    pub fn structure(&self) -> PathBuf {
        self.dir.join("structure.txt")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.txt")
    }
    pub fn summary_text(&self) -> PathBuf {
        self.dir.join("summary.txt")
    }
    pub fn summary_kv(&self) -> PathBuf {
        self.dir.join("summary.kv")
    }
}

/// Checkpoint metadata describing how a dense network was produced.
pub fn provenance(config: &PipelineConfig) -> Vec<(String, String)> {
    let g = &config.group;
    vec![
        ("method".into(), config.method.name().into()),
        ("groups".into(), g.groups.to_string()),
        ("lambda".into(), g.lambda.to_string()),
        ("tau".into(), g.tau.to_string()),
        ("epochs".into(), g.epochs.to_string()),
        ("seed".into(), g.seed.to_string()),
    ]
}

/// Phase 1: joint training of weights and group logits.
pub fn learn_groups(
    config: &PipelineConfig,
    data: &DatasetHandle,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Network, GroupParameters)> {
    let mut net = init_network(config.group.seed)?;
    let source = match config.method {
        Method::Grouped => AlphaSource::Learned,
        Method::ChannelBaseline => AlphaSource::FixedOnes,
    };
    let (params, _) = group_learning_phase(&mut net, &data.train, Some(&data.validation), &config.group, source, on_epoch)?;
    Ok((net, params))
}

/// Phase 2: the pruned structure of a phase-one network.
pub fn prune_network(config: &PipelineConfig, net: &Network, params: &GroupParameters) -> Result<PrunedStructure> {
    match config.method {
        Method::Grouped => prune(net, &discretize_alpha(params), config.beta),
        Method::ChannelBaseline => channel_prune_baseline(net, BaselineRule::Ratio(config.beta)),
    }
}

/// Learned assignment and structure, for `report.txt`.
pub fn structure_report(params: &GroupParameters, structure: &PrunedStructure) -> String {
    let mut s = String::new();
    let assignment = discretize_alpha(params);
    for (l, a) in params.layers.iter().zip(&assignment.layers) {
        let _ = writeln!(s, "layer {} groups: {}", l.layer, format_partition(&a.group_of_filter));
        let p = l.pi.data();
        let n = params.groups;
        for k in 0..l.pi.dim(0) {
            let row: Vec<String> = p[k * n..(k + 1) * n].iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "  filter {k}: logits [{}]", row.join(", "));
        }
    }
    s.push('\n');
    s.push_str(&structure.report());
    s
}

/// Runs all three phases and writes the run directory.
pub fn run_pipeline(config: &PipelineConfig, mut progress: impl FnMut(&str)) -> Result<Summary> {
    config.validate()?;
    let files = RunFiles::new(&config.out_dir);
    std::fs::create_dir_all(&files.dir)?;
    write_atomic(&files.config(), config.to_text().as_bytes())?;
    let data = load_data(config).map_err(|e| e.in_phase("data"))?;
    let mut log = MetricsLog::create(&files.metrics())?;
    let mut log_err = None;
    let mut record = |phase: &'static str, m: &EpochMetrics, progress: &mut dyn FnMut(&str)| {
        let row = MetricsRow::from_epoch(phase, m);
        progress(&format!("{phase} epoch {}: {}", m.epoch, row.to_csv()));
        if let Err(e) = log.append(&row) {
            log_err.get_or_insert(e);
        }
    };

    let (mut net, params) = learn_groups(config, &data, |m| record("group-learning", m, &mut progress))
        .map_err(|e| e.in_phase("group-learning"))?;
    let dense_val = accuracy(&net, &data.validation, None)?;
    let dense_test = accuracy(&net, &data.test, None)?;
    save_dense(&files.dense(), &net, Some(&params), &provenance(config))?;

    let structure = prune_network(config, &net, &params).map_err(|e| e.in_phase("pruning"))?;
    write_atomic(&files.structure(), structure.to_text().as_bytes())?;
    write_atomic(&files.report(), structure_report(&params, &structure).as_bytes())?;
    let mask = structure.mask(&net)?;
    let pruned_val = accuracy(&net, &data.validation, Some(&mask))?;
    let pruned_test = accuracy(&net, &data.test, Some(&mask))?;
    progress(&format!("pruned: {} -> validation {pruned_val:.2}, test {pruned_test:.2}", structure.criterion));

    let outcome = finetune(
        &mut net,
        &mask,
        &data.train,
        &data.validation,
        &FinetuneSettings::from_config(config),
        |m| record("fine-tuning", m, &mut progress),
    )
    .map_err(|e| e.in_phase("fine-tuning"))?;
    if let Some(e) = log_err {
        return Err(e);
    }
    let masked_test = accuracy(&net, &data.test, Some(&mask))?;

    let mut model = compile(&net, &structure).map_err(|e| e.in_phase("compile"))?;
    for (k, v) in provenance(config) {
        model.set_meta(&k, v);
    }
    model.set_meta("criterion", structure.criterion.to_string());
    let final_test = compiled_accuracy(&model, &data.test)?;
    save_compiled(&files.pruned(), &model)?;
    let (cost, params_red, flops_red) = count_pruned_params_flops(&model)?;
    let dense_cost = count_dense_params_flops(&net.spec)?;
    let recount = count_structure_cost(&net.spec, &structure)?;

    let g = &config.group;
    let mut s = Summary::default();
    s.push("method", config.method.name());
    s.push("groups", g.groups);
    s.push("lambda", g.lambda);
    s.push("tau", g.tau);
    s.push("beta", config.beta);
    s.push("seed", g.seed);
    s.push("epochs", g.epochs);
    s.push("finetune_epochs", config.finetune_epochs);
    s.push("train_samples", data.train.len());
    s.push("validation_samples", data.validation.len());
    s.push("test_samples", data.test.len());
    s.push("dense_val_accuracy", dense_val);
    s.push("dense_test_accuracy", dense_test);
    s.push("pruned_val_accuracy_before_finetune", pruned_val);
    s.push("pruned_test_accuracy_before_finetune", pruned_test);
    s.push("best_finetune_epoch", outcome.best_epoch);
    s.push("final_val_accuracy", outcome.best_val_accuracy);
    s.push("final_test_accuracy", final_test);
    s.push("final_test_accuracy_masked", masked_test);
    s.push("dense_params", dense_cost.params);
    s.push("dense_flops", dense_cost.flops);
    s.push("pruned_params", cost.params);
    s.push("pruned_flops", cost.flops);
    s.push("params_reduction_pct", format!("{params_red:.2}"));
    s.push("flops_reduction_pct", format!("{flops_red:.2}"));
    s.push("recount_params", recount.params);
    s.push("recount_flops", recount.flops);
    for l in &structure.layers {
        let kept = l.alive().iter().filter(|&&a| a).count();
        let groups = l.groups.iter().filter(|g| !g.is_empty()).count();
        s.push(&format!("layer{}_filters", l.layer), format!("{kept}/{}", l.out_channels));
        s.push(&format!("layer{}_groups", l.layer), groups);
    }
    write_atomic(&files.summary_kv(), s.to_kv().as_bytes())?;
    write_atomic(&files.summary_text(), s.to_text().as_bytes())?;
    Ok(s)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynprune_core::compile::{
    compile, decode_compiled, decode_dense, load_dense, save_compiled, save_dense, write_atomic, CompiledModel,
    DenseCheckpoint,
};
use dynprune_core::config::{PipelineConfig, KEYS};
use dynprune_core::grouping::EpochMetrics;
use dynprune_core::model::count_dense_params_flops;
use dynprune_core::oracle::brute_force;
use dynprune_core::pipeline::{
    compiled_accuracy, finetune, init_network, learn_groups, load_data, provenance, prune_network, run_pipeline,
    structure_report, train_dense, FinetuneSettings, MetricsLog, MetricsRow, RunFiles,
};
use dynprune_core::pruning::{discretize_alpha, PrunedStructure};
use dynprune_core::train::accuracy;
use dynprune_core::{Error, ParseError, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Learned filter-group pruning for a small MNIST network.
#[derive(Parser)]
#[command(name = "dynprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense network on the task loss only.
    Train(Common),
    /// Jointly learn weights and filter groups (phase 1).
    GroupLearn(Common),
    /// Discretize the learned groups and prune (phase 2).
    Prune {
        #[command(flatten)]
        common: Common,
        /// Dense checkpoint with group logits [default: <out>/dense.dspc].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune a pruned structure and compile it (phase 3).
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Structure file [default: <out>/structure.txt].
        #[arg(long)]
        structure: Option<PathBuf>,
    },
    /// All three phases end to end.
    Run(Common),
    /// Evaluate every two-group partition of the grouped layer at fixed rates.
    BruteForce {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated pruning rates.
        #[arg(long, default_value = "0.25,0.5,0.75")]
        rates: String,
    },
    /// Test accuracy of a dense or compiled checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
    },
    /// Print a checkpoint's metadata and layers, or a structure report.
    Inspect { path: PathBuf },
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Any other setting as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    extra: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("groups", &self.groups),
            ("lambda", &self.lambda),
            ("beta", &self.beta),
            ("tau", &self.tau),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
            ("out", &self.out),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.extra {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set expects KEY=VALUE, got {kv:?}; keys: {}", KEYS.join(", ")))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn log_epoch<'a>(phase: &'static str, log: &'a mut MetricsLog) -> impl FnMut(&EpochMetrics) + 'a {
    move |m| {
        let row = MetricsRow::from_epoch(phase, m);
        eprintln!("{}", row.to_csv());
        if let Err(e) = log.append(&row) {
            eprintln!("warning: could not append metrics: {e}");
        }
    }
}

fn prepare_out(cfg: &PipelineConfig) -> Result<RunFiles> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(RunFiles::new(&cfg.out_dir))
}

fn load_groups_checkpoint(path: &Path) -> Result<DenseCheckpoint> {
    let ck = load_dense(path)?;
    if ck.groups.is_none() {
        return Err(Error::Data(format!("{} holds no group logits; run group-learn first", path.display())));
    }
    Ok(ck)
}

enum AnyCheckpoint {
    Dense(DenseCheckpoint),
    Compiled(CompiledModel),
}

fn load_any(path: &Path) -> Result<AnyCheckpoint> {
    let bytes = std::fs::read(path)?;
    match decode_dense(&bytes) {
        Ok(d) => Ok(AnyCheckpoint::Dense(d)),
        Err(Error::Parse(ParseError::Malformed(_))) => decode_compiled(&bytes).map(AnyCheckpoint::Compiled),
        Err(e) => Err(e),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let files = prepare_out(&cfg)?;
            let data = load_data(&cfg)?;
            let mut net = init_network(cfg.group.seed)?;
            let mut log = MetricsLog::create(&files.metrics())?;
            train_dense(&mut net, &data.train, Some(&data.validation), &cfg.group, log_epoch("train", &mut log))?;
            let mut meta = provenance(&cfg);
            meta[0].1 = "dense".into();
            save_dense(&files.dense(), &net, None, &meta)?;
            println!("test accuracy {:.2}%", accuracy(&net, &data.test, None)?);
            println!("wrote {}", files.dense().display());
        }
        Command::GroupLearn(common) => {
            let cfg = common.resolve()?;
            let files = prepare_out(&cfg)?;
            let data = load_data(&cfg)?;
            let mut log = MetricsLog::create(&files.metrics())?;
            let (net, params) = learn_groups(&cfg, &data, log_epoch("group-learning", &mut log))?;
            save_dense(&files.dense(), &net, Some(&params), &provenance(&cfg))?;
            for (l, a) in params.layers.iter().zip(discretize_alpha(&params).layers) {
                println!(
                    "layer {} groups {}",
                    l.layer,
                    dynprune_core::oracle::format_partition(&a.group_of_filter)
                );
            }
            println!("test accuracy {:.2}%", accuracy(&net, &data.test, None)?);
            println!("wrote {}", files.dense().display());
        }
        Command::Prune { common, checkpoint } => {
            let cfg = common.resolve()?;
            let files = prepare_out(&cfg)?;
            let ck = load_groups_checkpoint(&checkpoint.unwrap_or_else(|| files.dense()))?;
            let params = ck.groups.unwrap();
            let structure = prune_network(&cfg, &ck.net, &params)?;
            write_atomic(&files.structure(), structure.to_text().as_bytes())?;
            let report = structure_report(&params, &structure);
            write_atomic(&files.report(), report.as_bytes())?;
            let model = compile(&ck.net, &structure)?;
            print!("{report}");
            println!(
                "\nparams {} -> {}, FLOPs {} -> {}",
                model.meta("dense_params").unwrap_or("-"),
                model.meta("params").unwrap_or("-"),
                model.meta("dense_flops").unwrap_or("-"),
                model.meta("flops").unwrap_or("-")
            );
            println!("wrote {}", files.structure().display());
        }
        Command::Finetune {
            common,
            checkpoint,
            structure,
        } => {
            let cfg = common.resolve()?;
            let files = prepare_out(&cfg)?;
            let mut ck = load_dense(&checkpoint.unwrap_or_else(|| files.dense()))?;
            let structure_path = structure.unwrap_or_else(|| files.structure());
            let text = std::fs::read_to_string(&structure_path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", structure_path.display())))?;
            let structure = PrunedStructure::parse(&text)?;
            structure.validate(&ck.net.spec)?;
            let data = load_data(&cfg)?;
            let mask = structure.mask(&ck.net)?;
            let mut log = MetricsLog::create(&files.metrics())?;
            let outcome = finetune(
                &mut ck.net,
                &mask,
                &data.train,
                &data.validation,
                &FinetuneSettings::from_config(&cfg),
                log_epoch("fine-tuning", &mut log),
            )?;
            let mut model = compile(&ck.net, &structure)?;
            for (k, v) in ck.metadata {
                if model.meta(&k).is_none() {
                    model.set_meta(&k, v);
                }
            }
            model.set_meta("criterion", structure.criterion.to_string());
            save_compiled(&files.pruned(), &model)?;
            println!(
                "best epoch {} (validation {:.2}%), test accuracy {:.2}%",
                outcome.best_epoch,
                outcome.best_val_accuracy,
                compiled_accuracy(&model, &data.test)?
            );
            println!("wrote {}", files.pruned().display());
        }
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let summary = run_pipeline(&cfg, |line| eprintln!("{line}"))?;
            print!("{}", summary.to_text());
            println!("results in {}", cfg.out_dir.display());
        }
        Command::BruteForce {
            common,
            checkpoint,
            rates,
        } => {
            let cfg = common.resolve()?;
            let files = prepare_out(&cfg)?;
            let rates = rates
                .split(',')
                .map(|r| r.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad rate {r:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let ck = load_dense(&checkpoint.unwrap_or_else(|| files.dense()))?;
            let layer = *ck
                .net
                .spec
                .grouped_layers()
                .first()
                .ok_or_else(|| Error::Config("network has no grouped layer".into()))?;
            let learned = ck
                .groups
                .as_ref()
                .map(discretize_alpha)
                .and_then(|a| a.layer(layer).map(|l| l.group_of_filter.clone()));
            let data = load_data(&cfg)?;
            let report = brute_force(&ck.net, layer, cfg.group.groups, &rates, &data.validation, learned.as_deref(), |_| {})?;
            let path = files.dir.join("brute_force.csv");
            write_atomic(&path, report.to_csv().as_bytes())?;
            print!("{}", report.table());
            println!("wrote {}", path.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let data = load_data(&cfg)?;
            match load_any(&checkpoint)? {
                AnyCheckpoint::Dense(ck) => {
                    println!("dense test accuracy {:.2}%", accuracy(&ck.net, &data.test, None)?);
                }
                AnyCheckpoint::Compiled(model) => {
                    println!("compiled test accuracy {:.2}%", compiled_accuracy(&model, &data.test)?);
                }
            }
        }
        Command::Inspect { path } => {
            if path.extension().is_some_and(|e| e == "txt") {
                let structure = PrunedStructure::parse(&std::fs::read_to_string(&path)?)?;
                print!("{}", structure.report());
                return Ok(());
            }
            match load_any(&path)? {
                AnyCheckpoint::Dense(ck) => {
                    println!("dense network");
                    for (k, v) in &ck.metadata {
                        println!("  {k} = {v}");
                    }
                    for (i, l) in ck.net.spec.layers.iter().enumerate() {
                        println!("  layer {i}: {l:?}");
                    }
                    let cost = count_dense_params_flops(&ck.net.spec)?;
                    println!("  params {} FLOPs {}", cost.params, cost.flops);
                    if let Some(g) = &ck.groups {
                        for (l, a) in g.layers.iter().zip(discretize_alpha(g).layers) {
                            println!(
                                "  layer {} groups {}",
                                l.layer,
                                dynprune_core::oracle::format_partition(&a.group_of_filter)
                            );
                        }
                    }
                }
                AnyCheckpoint::Compiled(model) => {
                    println!("compiled model");
                    for (k, v) in &model.metadata {
                        println!("  {k} = {v}");
                    }
                    for (i, l) in model.layers.iter().enumerate() {
                        match l {
                            dynprune_core::compile::CompiledLayer::Conv(c) => {
                                println!("  layer {i}: grouped conv, {} inputs -> {} outputs", c.in_channels, c.out_channels());
                                for (p, g) in c.groups.iter().enumerate() {
                                    println!("    group {p}: filters {:?} gather {:?}", g.filters, g.gather);
                                }
                            }
                            other => println!("  layer {i}: {}", layer_name(other)),
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn layer_name(l: &dynprune_core::compile::CompiledLayer) -> String {
    use dynprune_core::compile::CompiledLayer::*;
    match l {
        Conv(c) => format!("grouped conv ({} groups)", c.groups.len()),
        BatchNorm { gamma, .. } => format!("batchnorm ({} channels)", gamma.numel()),
        Relu => "relu".into(),
        MaxPool { kernel, stride } => format!("max pool {kernel}x{kernel} stride {stride}"),
        Flatten => "flatten".into(),
        Linear { weight, .. } => format!("linear {} -> {}", weight.dim(1), weight.dim(0)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

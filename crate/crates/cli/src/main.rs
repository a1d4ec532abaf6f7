//! `dgm`: train, evaluate and inspect differentiable graph module models.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numeric failures (including failed self-checks).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dgm::checkpoint;
use dgm::config::ModelConfig;
use dgm::data::{
    load_point_clouds, load_tabular, make_splits, synth_clusters, synth_shapes, write_shape, write_tabular,
    ClusterSpec, NodeDataset, PointCloudSet, SplitScheme, TabularSchema,
};
use dgm::model::ModelInputs;
use dgm::report::MetricsReport;
use dgm::rng::DgmRng;
use dgm::segment::{evaluate_segmentation, train_segmentation};
use dgm::tensor::Tape;
use dgm::train::{cross_validate, evaluate, evaluate_inductive, prepare, run_inductive, run_transductive};
use dgm::verify::{gradient_suite, sampling_suite, GRAD_TOL};
use dgm::Error;

const SEGMENT_SPLIT_STREAM: u64 = 0x5a11;

#[derive(Parser)]
#[command(name = "dgm", version, about = "Differentiable graph module experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics report.
    Train(TrainArgs),
    /// Score a saved checkpoint.
    Eval(EvalArgs),
    /// Stratified k-fold evaluation of a configuration.
    Crossval(CrossvalArgs),
    /// Generate a synthetic dataset.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Write the graphs sampled by one forward pass, one file per layer.
    ExportGraph(ExportArgs),
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
    /// Statistical checks of the neighbour sampler.
    SampleTest(SampleTestArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Node table (CSV with a header row).
    #[arg(long, conflicts_with = "shapes", required_unless_present = "shapes")]
    data: Option<PathBuf>,
    /// Column layout of `--data`; inferred from `label`, `m1_*`, `m2_*`
    /// headers when absent.
    #[arg(long, requires = "data")]
    schema: Option<PathBuf>,
    /// Directory of point-cloud shapes (`x y z part` lines per file).
    #[arg(long)]
    shapes: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Transductive,
    Inductive,
}

#[derive(Args)]
struct TrainArgs {
    /// Model configuration (TOML); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "transductive")]
    split: SplitArg,
    #[arg(long, env = "DGM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for `model.ckpt` and `report.json`.
    #[arg(long)]
    out: PathBuf,
    /// Record wall time in the report (makes reports differ between runs).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Score the unseen nodes of the inductive split.
    #[arg(long)]
    inductive: bool,
    /// Stochastic passes averaged per prediction.
    #[arg(long, default_value_t = 8)]
    repeats: usize,
    /// Write the report here instead of standard output.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, env = "DGM_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also run the fixed-kNN baseline on the same folds.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Two-modality clustered nodes, written as CSV.
    Clusters {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 8)]
        node_dim: usize,
        #[arg(long, default_value_t = 3)]
        graph_dim: usize,
        #[arg(long, default_value_t = 1.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 2.0)]
        node_signal: f64,
        #[arg(long, env = "DGM_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Point clouds of two part-labelled primitives, one file per shape.
    Shapes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 15)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        points: usize,
        #[arg(long, env = "DGM_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphFormat {
    Edges,
    Dot,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "edges")]
    format: GraphFormat,
    /// Seed of the sampling noise; the checkpoint's seed by default.
    #[arg(long)]
    pass_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleTestArgs {
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long, env = "DGM_SEED", default_value_t = 0)]
    seed: u64,
}

fn load_config(path: Option<&Path>, seed: Option<u64>, epochs: Option<usize>) -> dgm::Result<ModelConfig> {
    let mut config = match path {
        Some(p) => ModelConfig::from_toml(&fs::read_to_string(p)?)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate()?;
    Ok(config)
}

fn load_nodes(data: &Path, schema: Option<&Path>) -> dgm::Result<NodeDataset> {
    let schema = match schema {
        Some(p) => TabularSchema::load(p)?,
        None => TabularSchema::from_header(data)?,
    };
    load_tabular(data, &schema)
}

fn split(ds: NodeDataset, scheme: SplitScheme, seed: u64) -> dgm::Result<NodeDataset> {
    let masks = make_splits(&ds, scheme, seed)?.remove(0);
    ds.with_masks(masks)
}

/// Shuffled 80/20 division of shapes into training and held-out sets.
fn shape_split(set: &PointCloudSet, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..set.shapes.len()).collect();
    DgmRng::new(seed).split(SEGMENT_SPLIT_STREAM).shuffle(&mut idx);
    let cut = (idx.len() * 4).div_ceil(5).min(idx.len().saturating_sub(1)).max(1);
    let test = idx.split_off(cut);
    (idx, test)
}

fn emit(report: &MetricsReport, path: Option<&Path>) -> dgm::Result<()> {
    let text = report.to_json()?;
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> dgm::Result<()> {
    let start = Instant::now();
    let mut config = load_config(args.config.as_deref(), args.seed, args.epochs)?;
    fs::create_dir_all(&args.out)?;
    let (model, report, split_scheme) = if let Some(dir) = &args.data.shapes {
        if args.config.is_none() {
            let seed = config.seed;
            config = ModelConfig {
                seed,
                epochs: args.epochs.unwrap_or(30),
                ..ModelConfig::pointcloud()
            };
        }
        let set = load_point_clouds(dir)?;
        let (train_idx, test_idx) = shape_split(&set, config.seed);
        let (model, history) = train_segmentation(&config, &set, &train_idx)?;
        let mut report = MetricsReport::new("segmentation", &config);
        report.mean_iou = Some(evaluate_segmentation(&model, &set, &test_idx, config.repeats, config.seed)?);
        if let Some(last) = history.last() {
            report.final_task_loss = Some(last.task_loss);
            report.final_graph_loss = Some(last.graph_loss);
        }
        report.temperature = model.temperatures();
        (model, report, None)
    } else {
        let data = args.data.data.as_deref().expect("clap requires --data or --shapes");
        let ds = load_nodes(data, args.data.schema.as_deref())?;
        let (scheme, protocol) = match args.split {
            SplitArg::Transductive => (SplitScheme::Transductive, "transductive"),
            SplitArg::Inductive => (SplitScheme::Inductive, "inductive"),
        };
        let ds = split(ds, scheme, config.seed)?;
        let out = match args.split {
            SplitArg::Transductive => run_transductive(&config, &ds)?,
            SplitArg::Inductive => run_inductive(&config, &ds)?,
        };
        let mut report = MetricsReport::new(protocol, &config).with_history(&out.history);
        report.accuracy = Some(out.evaluation.accuracy);
        report.per_class_accuracy = Some(out.evaluation.per_class_accuracy);
        (out.model, report, Some(scheme))
    };
    checkpoint::save(&args.out.join("model.ckpt"), &model, config.epochs, split_scheme)?;
    let mut report = report;
    if args.timing {
        report.wall_time_secs = Some(start.elapsed().as_secs_f64());
    }
    emit(&report, Some(&args.out.join("report.json")))?;
    if let Some(a) = report.accuracy {
        println!("accuracy {a:.4}");
    }
    if let Some(m) = report.mean_iou {
        println!("mean IoU {m:.4}");
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> dgm::Result<()> {
    if args.repeats == 0 {
        return Err(Error::Config("--repeats must be at least 1".into()));
    }
    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let config = &model.config;
    let report = if let Some(dir) = &args.data.shapes {
        let set = load_point_clouds(dir)?;
        let (_, test_idx) = shape_split(&set, config.seed);
        let mut report = MetricsReport::new("segmentation", config);
        report.mean_iou = Some(evaluate_segmentation(&model, &set, &test_idx, args.repeats, config.seed)?);
        report
    } else {
        let data = args.data.data.as_deref().expect("clap requires --data or --shapes");
        let ds = load_nodes(data, args.data.schema.as_deref())?;
        let scheme = if args.inductive {
            SplitScheme::Inductive
        } else {
            manifest.split.unwrap_or(SplitScheme::Transductive)
        };
        let ds = prepare(&split(ds, scheme, config.seed)?, config)?;
        let (protocol, evaluation) = if args.inductive {
            ("inductive", evaluate_inductive(&model, &ds, args.repeats, config.seed)?)
        } else {
            ("transductive", evaluate(&model, &ds, &ds.masks.test, args.repeats, config.seed)?)
        };
        let mut report = MetricsReport::new(protocol, config);
        report.accuracy = Some(evaluation.accuracy);
        report.per_class_accuracy = Some(evaluation.per_class_accuracy);
        report
    };
    emit(&report, args.report.as_deref())
}

fn crossval_cmd(args: &CrossvalArgs) -> dgm::Result<()> {
    let config = load_config(args.config.as_deref(), args.seed, args.epochs)?;
    let ds = load_nodes(&args.data, args.schema.as_deref())?;
    let mut report = MetricsReport::new("crossval", &config);
    let cv = cross_validate(&config, &ds, args.folds)?;
    eprintln!("model {:.4} +/- {:.4}", cv.mean, cv.std);
    report.accuracy = Some(cv.mean);
    report.crossval = Some(cv);
    if args.baseline {
        let cv = cross_validate(&config.knn_baseline(), &ds, args.folds)?;
        eprintln!("kNN baseline {:.4} +/- {:.4}", cv.mean, cv.std);
        report.baseline_crossval = Some(cv);
    }
    emit(&report, args.report.as_deref())
}

fn synth_cmd(command: &SynthCommand) -> dgm::Result<()> {
    match command {
        SynthCommand::Clusters {
            out,
            nodes,
            classes,
            node_dim,
            graph_dim,
            separation,
            noise,
            node_signal,
            seed,
        } => {
            let mut spec = ClusterSpec::new(*nodes, *classes, *node_dim, *graph_dim, *separation, *noise, *seed);
            spec.node_signal = *node_signal;
            let ds = synth_clusters(&spec)?;
            write_tabular(&ds, out, &TabularSchema::for_dataset(&ds))?;
            println!("wrote {} nodes to {}", ds.num_nodes(), out.display());
        }
        SynthCommand::Shapes {
            out,
            count,
            points,
            seed,
        } => {
            if *points == 0 {
                return Err(Error::Config("--points must be positive".into()));
            }
            fs::create_dir_all(out)?;
            let set = synth_shapes(*count, *points, *seed);
            for shape in &set.shapes {
                write_shape(&out.join(format!("{}.txt", shape.name)), shape)?;
            }
            println!("wrote {} shapes to {}", set.shapes.len(), out.display());
        }
    }
    Ok(())
}

fn export_cmd(args: &ExportArgs) -> dgm::Result<()> {
    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let config = &model.config;
    let ds = load_nodes(&args.data, args.schema.as_deref())?;
    let ds = prepare(&split(ds, manifest.split.unwrap_or(SplitScheme::Transductive), config.seed)?, config)?;
    let inputs = ModelInputs::from_dataset(&ds, config)?;
    let tape = Tape::new();
    let pass = model.forward(&tape, &inputs, &DgmRng::new(args.pass_seed.unwrap_or(config.seed)))?;
    fs::create_dir_all(&args.out)?;
    for (l, layer) in pass.layers.iter().enumerate() {
        let path = match args.format {
            GraphFormat::Edges => {
                let path = args.out.join(format!("layer{l}.txt"));
                layer.graph.write_edge_list(fs::File::create(&path)?)?;
                path
            }
            GraphFormat::Dot => {
                let path = args.out.join(format!("layer{l}.dot"));
                fs::write(&path, layer.graph.to_dot(&format!("layer{l}")))?;
                path
            }
        };
        println!("{}", path.display());
    }
    Ok(())
}

fn gradcheck_cmd() -> dgm::Result<bool> {
    let checks = gradient_suite()?;
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for c in &checks {
        let passed = c.report.passed();
        ok &= passed;
        worst = worst.max(c.report.max_rel_error);
        println!(
            "{:<20} {:.3e} {}",
            c.name,
            c.report.max_rel_error,
            if passed { "ok" } else { "FAILED" }
        );
    }
    println!("max relative error {worst:.3e} (tolerance {GRAD_TOL:e})");
    Ok(ok)
}

fn sample_test_cmd(args: &SampleTestArgs) -> dgm::Result<bool> {
    if args.draws == 0 {
        return Err(Error::Config("--draws must be positive".into()));
    }
    let checks = sampling_suite(args.draws, args.seed)?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        println!(
            "{:<24} observed {:.4?} expected {:.4?} p {:.4} {}",
            c.name,
            c.observed,
            c.expected,
            c.p_value,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(ok)
}

fn run(cli: Cli) -> dgm::Result<bool> {
    match cli.command {
        Command::Train(a) => train_cmd(&a).map(|_| true),
        Command::Eval(a) => eval_cmd(&a).map(|_| true),
        Command::Crossval(a) => crossval_cmd(&a).map(|_| true),
        Command::Synth(c) => synth_cmd(&c).map(|_| true),
        Command::ExportGraph(a) => export_cmd(&a).map(|_| true),
        Command::Gradcheck => gradcheck_cmd(),
        Command::SampleTest(a) => sample_test_cmd(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
